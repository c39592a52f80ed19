//! Raw-layout ingestion fixtures. Each fixture declares per-split frame
//! counts and the demonstrations that realize them; [`write_raw_layout`]
//! renders the demonstrations as tiny PNGs in the collection layout the
//! fixture names.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Deserialize;

const FIXTURES: &str = include_str!("../fixtures/ingestion.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Kitchen,
    Mime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct DeclaredCounts {
    pub train_non_success: usize,
    pub train_success: usize,
    pub test_non_success: usize,
    pub test_success: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DemoSpec {
    pub demo_id: String,
    pub num_frames: usize,
    pub success_onset: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IngestionFixture {
    pub layout: Layout,
    pub scale: f64,
    pub note: String,
    pub declared: DeclaredCounts,
    pub train: Vec<DemoSpec>,
    pub test: Vec<DemoSpec>,
}

pub fn ingestion_fixtures() -> BTreeMap<String, IngestionFixture> {
    serde_json::from_str(FIXTURES).expect("fixture file parses")
}

pub fn ingestion_fixture(name: &str) -> IngestionFixture {
    ingestion_fixtures().remove(name).unwrap_or_else(|| panic!("no fixture `{name}`"))
}

pub const FRAME_SIZE: (u32, u32) = (6, 4);

/// Deterministic, distinct pixels for frame `frame` of demo number `demo`.
pub fn frame_image(demo: usize, frame: usize) -> image::RgbImage {
    image::RgbImage::from_fn(FRAME_SIZE.0, FRAME_SIZE.1, |x, y| {
        let v = (demo * 31 + frame * 7 + (x + y * FRAME_SIZE.0) as usize * 13) % 256;
        image::Rgb([v as u8, (frame % 256) as u8, (demo * 17 % 256) as u8])
    })
}

fn save(img: &image::RgbImage, path: &Path) -> io::Result<()> {
    img.save(path).map_err(io::Error::other)
}

/// Writes the fixture's demonstrations into `dir` in its raw layout.
pub fn write_raw_layout(fx: &IngestionFixture, dir: &Path) -> io::Result<()> {
    let mut onsets = String::from("split,demo_id,success_onset\n");
    let mut demo_no = 0;
    for (split, demos) in [("train", &fx.train), ("test", &fx.test)] {
        for d in demos {
            match fx.layout {
                Layout::Kitchen => {
                    let sdir = dir.join(split);
                    fs::create_dir_all(&sdir)?;
                    for f in 0..d.num_frames {
                        save(&frame_image(demo_no, f), &sdir.join(format!("{}_{f}.png", d.demo_id)))?;
                    }
                    onsets.push_str(&format!("{split},{},{}\n", d.demo_id, d.success_onset));
                }
                Layout::Mime => {
                    let ddir = dir.join(split).join(&d.demo_id);
                    fs::create_dir_all(&ddir)?;
                    for f in 0..d.num_frames {
                        save(&frame_image(demo_no, f), &ddir.join(format!("{f:04}.png")))?;
                    }
                    fs::write(ddir.join("success_onset.txt"), format!("{}\n", d.success_onset))?;
                }
            }
            demo_no += 1;
        }
    }
    if fx.layout == Layout::Kitchen {
        fs::write(dir.join("onsets.csv"), onsets)?;
    }
    Ok(())
}
