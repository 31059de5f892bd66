//! Synthetic corpus generator.
//!
//! Produces datasets in the same record format as real collections: static conflict
//! scenarios plus frame-level task trajectories, with 16x16 PNG observations, task
//! and step text, optional background speech (interaction requests or unrelated
//! conversation) and labels. Every image carries a unique per-record signature so no
//! two records share an observation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_records, Dataset};
use crate::error::{Error, Result};
use crate::preference::Scenario;
use crate::types::{ConflictLabel, DatasetRecord, DetectionInput, ImageRef};

const SIDE: u32 = 16;

struct TaskTemplate {
    task: &'static str,
    steps: &'static [&'static str],
    /// Background tint of the room the task happens in.
    room: [u8; 3],
}

const TASKS: [TaskTemplate; 21] = [
    TaskTemplate { task: "Bring a bottle of water to the user", steps: &["Walk to the kitchen", "Open the fridge", "Pick up the water bottle", "Walk to the living room", "Hand over the bottle"], room: [200, 180, 120] },
    TaskTemplate { task: "Clean up the dining table", steps: &["Walk to the dining table", "Pick up the plates", "Walk to the sink", "Put the plates into the sink"], room: [180, 140, 100] },
    TaskTemplate { task: "Deliver the package to the study", steps: &["Pick up the package at the door", "Walk along the hallway", "Open the study door", "Place the package on the desk"], room: [120, 120, 160] },
    TaskTemplate { task: "Fetch the remote control", steps: &["Walk to the living room", "Search the sofa", "Pick up the remote control", "Return to the user"], room: [90, 150, 90] },
    TaskTemplate { task: "Hang the towel in the bathroom", steps: &["Pick up the towel", "Walk to the bathroom", "Open the bathroom door", "Hang the towel on the rack"], room: [150, 200, 220] },
    TaskTemplate { task: "Load the washing machine", steps: &["Pick up the laundry basket", "Walk to the laundry room", "Open the washing machine", "Put the clothes inside"], room: [220, 220, 230] },
    TaskTemplate { task: "Make a cup of tea", steps: &["Walk to the kitchen", "Fill the kettle", "Boil the water", "Pour water into the cup"], room: [210, 170, 90] },
    TaskTemplate { task: "Put the apple into the sink", steps: &["Pick up the apple", "Walk to the sink", "Place the apple into the sink"], room: [190, 190, 150] },
    TaskTemplate { task: "Put the book back on the shelf", steps: &["Pick up the book", "Walk to the bookshelf", "Place the book on the shelf"], room: [140, 100, 70] },
    TaskTemplate { task: "Put the bowl into the sink", steps: &["Pick up the bowl", "Walk to the kitchen", "Place the bowl into the sink"], room: [170, 160, 140] },
    TaskTemplate { task: "Put the cup in the dishwasher", steps: &["Pick up the cup", "Walk to the dishwasher", "Open the dishwasher", "Place the cup on the rack"], room: [160, 180, 200] },
    TaskTemplate { task: "Put the shoes on the rack", steps: &["Pick up the shoes", "Walk to the entrance", "Place the shoes on the rack"], room: [110, 90, 80] },
    TaskTemplate { task: "Return the milk to the fridge", steps: &["Pick up the milk carton", "Walk to the fridge", "Open the fridge", "Place the milk inside"], room: [230, 230, 210] },
    TaskTemplate { task: "Serve the snacks to the guests", steps: &["Pick up the snack tray", "Walk to the living room", "Place the tray on the coffee table"], room: [200, 120, 120] },
    TaskTemplate { task: "Take out the trash", steps: &["Walk to the kitchen", "Pick up the trash bag", "Walk to the back door", "Open the back door", "Drop the bag into the bin"], room: [100, 110, 100] },
    TaskTemplate { task: "Throw the bottle into the recycling bin", steps: &["Pick up the empty bottle", "Walk to the recycling bin", "Drop the bottle into the bin"], room: [80, 160, 140] },
    TaskTemplate { task: "Tidy up the toys in the kids room", steps: &["Walk to the kids room", "Pick up the toys", "Put the toys into the toy box"], room: [230, 150, 200] },
    TaskTemplate { task: "Turn on the light in the bedroom", steps: &["Walk to the bedroom", "Open the bedroom door", "Press the light switch"], room: [60, 60, 110] },
    TaskTemplate { task: "Water the plants on the balcony", steps: &["Pick up the watering can", "Fill the watering can", "Walk to the balcony", "Water the plants"], room: [120, 200, 100] },
    TaskTemplate { task: "Wipe the kitchen counter", steps: &["Pick up the cloth", "Walk to the counter", "Wipe the counter surface"], room: [210, 200, 180] },
    TaskTemplate { task: "Bring the medicine to grandma", steps: &["Walk to the cabinet", "Open the cabinet", "Pick up the medicine box", "Walk to the bedroom", "Hand over the medicine"], room: [170, 130, 190] },
];

const REQUEST_OPENERS: [&str; 5] = ["Hey robot", "Robot", "Excuse me robot", "Hi robot", "Robot please"];
const REQUEST_BODIES: [&str; 12] = [
    "can you get me a glass of juice",
    "come over here and help me",
    "bring me my phone from the bedroom",
    "stop what you are doing and follow me",
    "could you turn off the television",
    "help me carry these boxes upstairs",
    "what time is it now",
    "play some music for me",
    "open the window in the hallway",
    "fetch my glasses from the desk",
    "tell me a joke",
    "charge my tablet for me",
];

const NOISE: [&str; 14] = [
    "Did you finish your homework already",
    "I think it will rain later this afternoon",
    "Mom said dinner is at seven tonight",
    "Have you seen my keys anywhere",
    "That movie last night was really boring",
    "We should visit grandpa on Sunday",
    "My boss called twice during the meeting",
    "Let's order pizza for the weekend",
    "The traffic downtown was terrible today",
    "I bought new shoes at the mall",
    "Your sister is coming home next week",
    "The football match starts at eight",
    "I forgot to pay the electricity bill",
    "This coffee tastes a little bitter",
];

type Rgb = [u8; 3];
/// x, y, width, height in pixels.
type Rect = (u32, u32, u32, u32);

/// Shape of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub static_count: usize,
    /// Frames per trajectory; trajectory `i` runs task `i % 21`.
    pub trajectory_frames: Vec<usize>,
    /// Probability that a Normal frame carries unrelated conversation.
    pub noise_rate: f64,
}

impl SynthConfig {
    /// 134 static scenarios and 1625 frames over 21 tasks (1759 records). The two
    /// alphabetically first tasks have 96 frames each, so holding them out together
    /// with 32 statics leaves 224 test and 1535 training records.
    pub fn full(seed: u64) -> Self {
        let mut frames = vec![0usize; TASKS.len()];
        let mut order: Vec<usize> = (0..TASKS.len()).collect();
        order.sort_by_key(|i| TASKS[*i].task);
        for (rank, task_idx) in order.iter().enumerate() {
            frames[*task_idx] = match rank {
                0 | 1 => 96,
                2..=9 => 76,
                _ => 75,
            };
        }
        SynthConfig {
            seed,
            static_count: 134,
            trajectory_frames: frames,
            noise_rate: 0.15,
        }
    }

    /// A few hundred records, for fast tests.
    pub fn small(seed: u64) -> Self {
        SynthConfig {
            seed,
            static_count: 40,
            trajectory_frames: vec![40; 6],
            noise_rate: 0.2,
        }
    }

    pub fn total(&self) -> usize {
        self.static_count + self.trajectory_frames.iter().sum::<usize>()
    }
}

struct Generator {
    rng: ChaCha8Rng,
    serial: u32,
}

impl Generator {
    fn request(&mut self) -> String {
        format!(
            "{}, {}",
            REQUEST_OPENERS.choose(&mut self.rng).expect("non-empty"),
            REQUEST_BODIES.choose(&mut self.rng).expect("non-empty")
        )
    }

    fn noise(&mut self) -> String {
        NOISE.choose(&mut self.rng).expect("non-empty").to_string()
    }

    /// Scene image: room tint, step marker, conflict motif and a unique signature.
    fn image(&mut self, task_idx: usize, step_idx: usize, label: ConflictLabel) -> Vec<u8> {
        let room = TASKS[task_idx].room;
        let jitter: i16 = self.rng.gen_range(-6..=6);
        let mut img = image::RgbImage::from_fn(SIDE, SIDE, |x, y| {
            let shade = ((x + y) * 2) as i16 + jitter;
            image::Rgb(room.map(|c| (i16::from(c) + shade).clamp(0, 255) as u8))
        });
        // step marker: a bar whose row depends on the step
        let row = 2 + (step_idx as u32 * 3) % 10;
        for x in 1..6 {
            img.put_pixel(x, row, image::Rgb([250, 250, 250]));
        }
        let motif: Option<(Rgb, Rect)> = match label {
            ConflictLabel::Normal => None,
            ConflictLabel::HumanInteraction => Some(([230, 60, 60], (8, 3, 4, 9))),
            ConflictLabel::HumanOccupancy => Some(([60, 60, 230], (6, 4, 7, 8))),
            ConflictLabel::GoalAbsence => Some(([0, 0, 0], (9, 9, 5, 5))),
            ConflictLabel::ObjectState => Some(([240, 200, 20], (10, 1, 3, 12))),
        };
        if let Some((color, (x0, y0, w, h))) = motif {
            for x in x0..(x0 + w).min(SIDE) {
                for y in y0..(y0 + h).min(SIDE) {
                    img.put_pixel(x, y, image::Rgb(color));
                }
            }
        }
        // signature: base-16 digits of the serial in the bottom-right pixels, one digit
        // per channel, each well inside its own intensity level
        let mut serial = self.serial;
        self.serial += 1;
        for px in 0..3u32 {
            let mut rgb = [0u8; 3];
            for c in &mut rgb {
                *c = ((serial % 16) * 16 + 8) as u8;
                serial /= 16;
            }
            img.put_pixel(SIDE - 1 - px, SIDE - 1, image::Rgb(rgb));
        }
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .expect("encoding to memory cannot fail");
        out.into_inner()
    }

    fn speech_for(&mut self, label: ConflictLabel, noise_rate: f64) -> Option<String> {
        match label {
            ConflictLabel::HumanInteraction => Some(self.request()),
            ConflictLabel::Normal if self.rng.gen_bool(noise_rate) => Some(self.noise()),
            _ => None,
        }
    }
}

/// A generated record together with its encoded image.
pub struct SynthRecord {
    pub record: DatasetRecord,
    pub png: Vec<u8>,
}

/// Generates records in memory. Image paths are `images/<id>.png`.
pub fn generate(config: &SynthConfig) -> Vec<SynthRecord> {
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        serial: 0,
    };
    let mut out = Vec::with_capacity(config.total());

    for i in 0..config.static_count {
        let task_idx = gen.rng.gen_range(0..TASKS.len());
        let template = &TASKS[task_idx];
        let step_idx = gen.rng.gen_range(0..template.steps.len());
        // statics are mostly conflicts, with some normal scenes
        let label = match i % 6 {
            5 => ConflictLabel::Normal,
            k => ConflictLabel::CONFLICTS[k % 4],
        };
        let id = format!("static-{i:04}");
        let png = gen.image(task_idx, step_idx, label);
        out.push(SynthRecord {
            record: DatasetRecord {
                image: format!("images/{id}.png"),
                id,
                task: template.task.to_string(),
                step: template.steps[step_idx].to_string(),
                speech: gen.speech_for(label, config.noise_rate),
                label,
                trajectory_id: None,
                frame_index: None,
            },
            png,
        });
    }

    for (traj, &frames) in config.trajectory_frames.iter().enumerate() {
        let task_idx = traj % TASKS.len();
        let template = &TASKS[task_idx];
        let trajectory_id = format!("traj-{traj:02}");
        // one or two conflict episodes of 3-8 frames each
        let mut labels = vec![ConflictLabel::Normal; frames];
        let episodes = if frames >= 30 { 2 } else { 1 };
        for e in 0..episodes {
            let len = gen.rng.gen_range(3..=8).min(frames / (2 * episodes)).max(1);
            let region = frames / episodes;
            let start = e * region + gen.rng.gen_range(0..region.saturating_sub(len).max(1));
            let kind = *ConflictLabel::CONFLICTS.choose(&mut gen.rng).expect("non-empty");
            for l in labels.iter_mut().skip(start).take(len) {
                *l = kind;
            }
        }
        for (frame, label) in labels.into_iter().enumerate() {
            let step_idx = frame * template.steps.len() / frames.max(1);
            let id = format!("{trajectory_id}-f{frame:04}");
            let png = gen.image(task_idx, step_idx, label);
            out.push(SynthRecord {
                record: DatasetRecord {
                    image: format!("images/{id}.png"),
                    id,
                    task: template.task.to_string(),
                    step: template.steps[step_idx].to_string(),
                    speech: gen.speech_for(label, config.noise_rate),
                    label,
                    trajectory_id: Some(trajectory_id.clone()),
                    frame_index: Some(frame as u32),
                },
                png,
            });
        }
    }
    out
}

/// Generates a corpus into `dir` (`dataset.jsonl` plus `images/`) and loads it.
pub fn write_corpus(config: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let generated = generate(config);
    for item in &generated {
        let path = dir.join(&item.record.image);
        std::fs::write(&path, &item.png).map_err(|e| Error::io(&path, e))?;
    }
    let records: Vec<DatasetRecord> = generated.into_iter().map(|g| g.record).collect();
    let path = dir.join("dataset.jsonl");
    write_records(&path, &records)?;
    Dataset::load(&path)
}

/// What a scenario is shown for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPurpose {
    /// The user picks an option and an emergency level.
    Annotation,
    /// The system predicts the option; the user rates the prediction.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub purpose: ScenarioPurpose,
    #[serde(flatten)]
    pub scenario: Scenario,
}

/// Ten static scenarios per conflict type: five to annotate, five to predict. Images
/// are written to `image_dir`; returned inputs reference them by absolute path.
pub fn default_scenarios(seed: u64, image_dir: &Path) -> Result<Vec<ScenarioEntry>> {
    std::fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(seed),
        serial: 0,
    };
    let mut entries = Vec::with_capacity(40);
    for label in ConflictLabel::CONFLICTS {
        for i in 0..10 {
            let task_idx = gen.rng.gen_range(0..TASKS.len());
            let template = &TASKS[task_idx];
            let step_idx = gen.rng.gen_range(0..template.steps.len());
            let purpose = if i < 5 {
                ScenarioPurpose::Annotation
            } else {
                ScenarioPurpose::Prediction
            };
            let id = format!("{}-{:02}", label.as_str(), i);
            let path: PathBuf = image_dir.join(format!("{id}.png"));
            let png = gen.image(task_idx, step_idx, label);
            std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
            let path = std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
            entries.push(ScenarioEntry {
                purpose,
                scenario: Scenario {
                    scenario_id: Some(id),
                    input: DetectionInput::new(
                        ImageRef::Path(path),
                        template.task,
                        template.steps[step_idx],
                        gen.speech_for(label, 0.0),
                    ),
                    label,
                },
            });
        }
    }
    Ok(entries)
}
