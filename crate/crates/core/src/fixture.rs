//! Small synthetic VideoQA world built entirely from mock embeddings.
//!
//! Ten topics, each with three captions that mention its answer word, plus
//! neutral filler captions (some duplicated). Every video belongs to one
//! topic; its frames are noisy copies of the topic captions' embeddings, so
//! retrieval surfaces the right captions and a context-reading scorer can
//! recover the answer. Two questions per topic give 20 records.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::answer::{mock_embed, mock_frame_key, CandidateSet, Embedder, MockBackend};
use crate::corpus::{normalize_rows, save_vectors, CorpusIndex, EmbeddingMatrix, TextCorpus};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ManifestEntry, QaRecord};
use crate::retrieval::FrameFeatures;

pub const FIXTURE_DIM: usize = 64;
pub const FIXTURE_FRAMES: usize = 10;
/// Captions per frame the fixture is tuned for; larger depths pull in
/// captions from unrelated topics.
pub const FIXTURE_K: usize = 3;
const FRAME_NOISE: f32 = 0.6;

struct Topic {
    answer: &'static str,
    kind: &'static str,
    questions: [&'static str; 2],
    captions: [&'static str; 3],
}

const TOPICS: [Topic; 10] = [
    Topic {
        answer: "piano",
        kind: "what",
        questions: ["what instrument is being played?", "what is the man playing?"],
        captions: ["a man is playing piano", "hands moving over the piano keys", "a pianist bows beside a grand piano"],
    },
    Topic {
        answer: "guitar",
        kind: "what",
        questions: ["what instrument is being played?", "what does the woman strum?"],
        captions: ["a woman strums a guitar", "a guitar player sings by the fire", "close up of guitar strings"],
    },
    Topic {
        answer: "car",
        kind: "what",
        questions: ["what vehicle is shown?", "what transportation did the men use?"],
        captions: ["two men are in a car", "a red car drives down the road", "a car parks near the hall"],
    },
    Topic {
        answer: "bicycle",
        kind: "what",
        questions: ["what vehicle is shown?", "what is the boy riding?"],
        captions: ["a boy rides a bicycle", "a bicycle leans against a wall", "cyclists race their bicycle uphill"],
    },
    Topic {
        answer: "dog",
        kind: "who",
        questions: ["what animal appears?", "who chases the ball?"],
        captions: ["a dog runs across the yard", "a dog catches a frisbee", "the dog barks at the mailman"],
    },
    Topic {
        answer: "cat",
        kind: "who",
        questions: ["what animal appears?", "who sleeps on the sofa?"],
        captions: ["a cat sleeps on the sofa", "a cat chases a red laser dot", "the cat licks its paw"],
    },
    Topic {
        answer: "horse",
        kind: "who",
        questions: ["what animal appears?", "who gallops in the field?"],
        captions: ["a horse gallops in the field", "a girl brushes her horse", "a horse jumps over a fence"],
    },
    Topic {
        answer: "beach",
        kind: "where",
        questions: ["where does this happen?", "where are the people relaxing?"],
        captions: ["people relax on the beach", "waves crash on a sandy beach", "kids build a castle on the beach"],
    },
    Topic {
        answer: "kitchen",
        kind: "where",
        questions: ["where does this happen?", "where is the food cooked?"],
        captions: ["a chef cooks in the kitchen", "a family eats breakfast in the kitchen", "steam rises from a pot in the kitchen"],
    },
    Topic {
        answer: "snow",
        kind: "where",
        questions: ["where does this happen?", "what covers the ground?"],
        captions: ["a skier glides through fresh snow", "children throw snow at each other", "a cabin covered in snow"],
    },
];

const FILLER: [&str; 24] = [
    "a person walks down the street",
    "the sun sets over the city",
    "a crowd gathers in the square",
    "a woman talks on the phone",
    "a man reads a newspaper",
    "clouds drift across the sky",
    "a person walks down the street",
    "someone opens a door",
    "a group of friends laugh together",
    "a man waves at the camera",
    "traffic lights change color",
    "the camera pans across a room",
    "a woman smiles at the camera",
    "rain falls on the window",
    "the sun sets over the city",
    "a man ties his shoes",
    "a child claps her hands",
    "an old man sits on a bench",
    "leaves blow in the wind",
    "a person types on a laptop",
    "a woman walks into a shop",
    "someone pours a glass of water",
    "a man checks his watch",
    "people wait at a bus stop",
];

const EXTRA_CANDIDATES: [&str; 4] = ["bus", "tree", "phone", "ice cream"];

#[derive(Debug, Clone)]
pub struct MockFixture {
    pub index: CorpusIndex,
    pub frames: HashMap<String, FrameFeatures>,
    pub records: Vec<QaRecord>,
    pub candidates: CandidateSet,
}

/// Paths written by [`MockFixture::write`].
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub captions: PathBuf,
    pub index_dir: PathBuf,
    pub manifest: PathBuf,
    pub dataset: PathBuf,
    pub candidates: PathBuf,
}

pub fn fixture_captions() -> Vec<String> {
    let mut out: Vec<String> = TOPICS
        .iter()
        .flat_map(|t| t.captions.iter().map(|c| c.to_string()))
        .collect();
    // interleave filler so topic rows are not contiguous
    for (i, f) in FILLER.iter().enumerate() {
        out.insert((i * 7) % (out.len() + 1), f.to_string());
    }
    out
}

fn video_frames(video_id: &str, topic: &Topic) -> Result<FrameFeatures> {
    let rows: Vec<Vec<f32>> = (0..FIXTURE_FRAMES)
        .map(|t| {
            let base = mock_embed(topic.captions[t % 3], FIXTURE_DIM);
            let noise = mock_embed(&mock_frame_key(video_id, t), FIXTURE_DIM);
            base.iter().zip(&noise).map(|(b, n)| b + FRAME_NOISE * n).collect()
        })
        .collect();
    let m = normalize_rows(EmbeddingMatrix::from_rows(&rows, false)?)?;
    FrameFeatures::new(video_id, m)
}

impl MockFixture {
    pub fn generate() -> Result<Self> {
        let texts = fixture_captions();
        let embeddings = MockBackend::new(FIXTURE_DIM).embed_texts(&texts)?;
        let index = CorpusIndex::new(TextCorpus::from_texts(texts)?, embeddings)?;

        let mut frames = HashMap::new();
        let mut records = Vec::new();
        for (q, question_slot) in [0usize, 1].iter().enumerate() {
            for (j, topic) in TOPICS.iter().enumerate() {
                let video_id = format!("video{:02}", q * TOPICS.len() + j);
                frames.insert(video_id.clone(), video_frames(&video_id, topic)?);
                records.push(QaRecord {
                    video_id,
                    question: topic.questions[*question_slot].to_owned(),
                    answer: topic.answer.to_owned(),
                    answer_type: Some(topic.kind.to_owned()),
                });
            }
        }
        let candidates = CandidateSet::new(
            TOPICS
                .iter()
                .map(|t| t.answer)
                .chain(EXTRA_CANDIDATES.iter().copied()),
        )?;
        Ok(Self {
            index,
            frames,
            records,
            candidates,
        })
    }

    /// Default evaluation settings with the fixture's retrieval depth.
    pub fn eval_config() -> EvalConfig {
        EvalConfig {
            k: FIXTURE_K,
            ..EvalConfig::default()
        }
    }

    /// Writes captions, index, frame vectors + manifest, dataset and
    /// candidate list under `dir`.
    pub fn write(&self, dir: &Path) -> Result<FixtureFiles> {
        let io = |p: &Path, e| Error::io(p, e);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| io(&frames_dir, e))?;

        let files = FixtureFiles {
            captions: dir.join("captions.txt"),
            index_dir: dir.join("index"),
            manifest: dir.join("frames.jsonl"),
            dataset: dir.join("dataset.jsonl"),
            candidates: dir.join("candidates.txt"),
        };

        let captions: String = self
            .index
            .corpus()
            .entries()
            .iter()
            .map(|e| format!("{}\n", e.text))
            .collect();
        fs::write(&files.captions, captions).map_err(|e| io(&files.captions, e))?;
        self.index.save(&files.index_dir)?;

        let mut ids: Vec<&String> = self.frames.keys().collect();
        ids.sort();
        let mut manifest = String::new();
        for id in ids {
            let f = &self.frames[id];
            let rel = PathBuf::from("frames").join(format!("{id}.r2av"));
            save_vectors(&dir.join(&rel), f.matrix())?;
            let entry = ManifestEntry {
                video_id: id.clone(),
                path: rel,
                num_frames: f.num_frames(),
            };
            manifest.push_str(&serde_json::to_string(&entry)?);
            manifest.push('\n');
        }
        fs::write(&files.manifest, manifest).map_err(|e| io(&files.manifest, e))?;

        let mut dataset = String::new();
        for r in &self.records {
            dataset.push_str(&serde_json::to_string(r)?);
            dataset.push('\n');
        }
        fs::write(&files.dataset, dataset).map_err(|e| io(&files.dataset, e))?;

        let cands: String = self.candidates.answers().iter().map(|c| format!("{c}\n")).collect();
        fs::write(&files.candidates, cands).map_err(|e| io(&files.candidates, e))?;
        Ok(files)
    }
}
