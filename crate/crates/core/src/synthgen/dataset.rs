//! On-disk dataset format.
//!
//! ```text
//! <dir>/annotations.json   { video_id, width, height, frames: [ { frame, objects: [ { object_id, class_id, bbox } ] } ] }
//! <dir>/frames/000000.png  8-bit RGB, one file per annotation entry
//! <dir>/scene.json         optional generator config (absent for converted data)
//! ```
//!
//! A corpus is a directory holding `corpus.json` (`{ "videos": [id, ...] }`)
//! and one dataset directory per video id.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameRecord, Image, SceneConfig, SyntheticVideo};
use crate::error::{Error, Result};
use crate::geometry::ObjectAnnotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFrame {
    pub frame: usize,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<AnnotationFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusIndex {
    videos: Vec<String>,
}

fn frame_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join("frames").join(format!("{index:06}.png"))
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(io_err)?;
    w.write_image_data(&image.data).map_err(io_err)?;
    w.finish().map_err(io_err)
}

fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::schema(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::schema(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::schema(path, format!("unsupported color type {other:?}"))),
    };
    Image::new(w, h, data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(video: &SyntheticVideo, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let ann = AnnotationFile {
        video_id: video.video_id.clone(),
        width: video.width,
        height: video.height,
        frames: video
            .frames
            .iter()
            .map(|f| AnnotationFrame {
                frame: f.frame_index,
                objects: f.annotations.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("annotations.json"), &ann)?;
    if let Some(cfg) = &video.config {
        write_json(&dir.join("scene.json"), cfg)?;
    }
    for f in &video.frames {
        write_png(&frame_path(dir, f.frame_index), &f.image)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticVideo> {
    let ann_path = dir.join("annotations.json");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::schema(&ann_path, e.to_string()))?;
    for (k, f) in ann.frames.iter().enumerate() {
        if f.frame != k {
            return Err(Error::schema(
                &ann_path,
                format!("frame entries must be contiguous from 0: entry {k} has frame {}", f.frame),
            ));
        }
        let mut ids: Vec<&str> = f.objects.iter().map(|o| o.object_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::schema(&ann_path, format!("duplicate object_id in frame {k}")));
        }
    }
    let png_count = fs::read_dir(dir.join("frames"))
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
                .count()
        })
        .unwrap_or(0);
    if png_count != ann.frames.len() {
        return Err(Error::schema(
            &ann_path,
            format!("{} frame entries but {png_count} frame images", ann.frames.len()),
        ));
    }
    let scene_path = dir.join("scene.json");
    let config = if scene_path.exists() {
        let text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
        let cfg: SceneConfig =
            serde_json::from_str(&text).map_err(|e| Error::schema(&scene_path, e.to_string()))?;
        Some(cfg)
    } else {
        None
    };
    let mut frames = Vec::with_capacity(ann.frames.len());
    for f in ann.frames {
        let path = frame_path(dir, f.frame);
        let image = read_png(&path)?;
        if image.width != ann.width || image.height != ann.height {
            return Err(Error::schema(
                &path,
                format!("image is {}x{}, annotations declare {}x{}", image.width, image.height, ann.width, ann.height),
            ));
        }
        frames.push(FrameRecord {
            frame_index: f.frame,
            image,
            annotations: f.objects,
        });
    }
    Ok(SyntheticVideo {
        video_id: ann.video_id,
        width: ann.width,
        height: ann.height,
        config,
        frames,
    })
}

/// Writes each video to `<dir>/<video_id>/` plus a `corpus.json` index.
pub fn write_corpus(videos: &[SyntheticVideo], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in videos {
        write_dataset(v, &dir.join(&v.video_id))?;
    }
    write_json(
        &dir.join("corpus.json"),
        &CorpusIndex {
            videos: videos.iter().map(|v| v.video_id.clone()).collect(),
        },
    )
}

/// Reads a corpus directory, or a single dataset directory as a one-video corpus.
pub fn read_corpus(dir: &Path) -> Result<Vec<SyntheticVideo>> {
    let index_path = dir.join("corpus.json");
    if !index_path.exists() && dir.join("annotations.json").exists() {
        return Ok(vec![read_dataset(dir)?]);
    }
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text).map_err(|e| Error::schema(&index_path, e.to_string()))?;
    index.videos.iter().map(|id| read_dataset(&dir.join(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_video;
    use crate::synthgen::tests::one_object_scene;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_video(&one_object_scene([1.3, 0.7], 5, 0.05)).unwrap();
        write_dataset(&v, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), v);
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let v = generate_video(&one_object_scene([1.0, 0.0], 3, 0.1)).unwrap();
        write_dataset(&v, a.path()).unwrap();
        write_dataset(&v, b.path()).unwrap();
        for name in ["annotations.json", "scene.json", "frames/000002.png"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn missing_frame_entry_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_video(&one_object_scene([0.0, 0.0], 3, 0.0)).unwrap();
        write_dataset(&v, dir.path()).unwrap();
        let path = dir.path().join("annotations.json");
        let mut ann: AnnotationFile = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        ann.frames.remove(1);
        fs::write(&path, serde_json::to_string(&ann).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Schema { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_bbox_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_video(&one_object_scene([0.0, 0.0], 1, 0.0)).unwrap();
        write_dataset(&v, dir.path()).unwrap();
        let path = dir.path().join("annotations.json");
        let text = fs::read_to_string(&path).unwrap().replacen("\"class_id\": 0", "\"class_id\": \"car\"", 1);
        fs::write(&path, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("annotations.json"), "{err}");
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = one_object_scene([0.0, 0.0], 2, 0.0);
        a.video_id = "a".into();
        let mut b = one_object_scene([1.0, 0.0], 3, 0.0);
        b.video_id = "b".into();
        let vids = vec![generate_video(&a).unwrap(), generate_video(&b).unwrap()];
        write_corpus(&vids, dir.path()).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), vids);
        assert_eq!(read_corpus(&dir.path().join("b")).unwrap(), vec![vids[1].clone()]);
    }
}
