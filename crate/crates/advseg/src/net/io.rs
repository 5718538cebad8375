//! Checkpoint persistence: a structured-text header followed by named TNSR
//! parameter blobs. Round trips are bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Checkpoint, ModelConfig, TrainMeta};
use crate::tensor::tnsr;

const HEADER_MAGIC: &str = "ADVSEG-CKPT 1";

pub fn save_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HEADER_MAGIC}")?;
    writeln!(w, "num_classes = {}", cp.config.num_classes)?;
    writeln!(w, "stage_widths = {}", join(&cp.config.stage_widths))?;
    writeln!(w, "skip_stages = {}", join(&cp.config.skip_stages))?;
    writeln!(w, "epochs = {}", cp.meta.epochs)?;
    writeln!(w, "seed = {}", cp.meta.seed)?;
    match cp.meta.final_loss {
        // shortest round-trip float formatting keeps the reload bit-identical
        Some(l) => writeln!(w, "final_loss = {}", l)?,
        None => writeln!(w, "final_loss = none")?,
    }
    writeln!(
        w,
        "config_sha256 = {}",
        cp.config_digest.as_deref().unwrap_or("-")
    )?;
    writeln!(w, "params = {}", cp.params().len())?;
    writeln!(w, "---")?;
    for (name, tensor) in cp.params() {
        writeln!(w, "{name}")?;
        tnsr::write_tnsr(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

struct HeaderReader<'a, R: Read> {
    inner: &'a mut R,
    path: String,
}

impl<R: Read> HeaderReader<'_, R> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Reads one `\n`-terminated line without consuming past it.
    fn line(&mut self, field: &str) -> Result<String> {
        let mut out = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = self.inner.read(&mut byte)?;
            if n == 0 {
                return Err(self.err(field, "unexpected end of file"));
            }
            if byte[0] == b'\n' {
                return String::from_utf8(out).map_err(|e| self.err(field, e.to_string()));
            }
            out.push(byte[0]);
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.line(key)?;
        let prefix = format!("{key} = ");
        line.strip_prefix(&prefix)
            .map(str::to_string)
            .ok_or_else(|| self.err(key, format!("expected '{prefix}...', got '{line}'")))
    }

    fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.keyed(key)?;
        raw.parse::<T>().map_err(|e| self.err(key, e.to_string()))
    }

    fn keyed_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let raw = self.keyed(key)?;
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>().map_err(|e| self.err(key, e.to_string())))
            .collect()
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut file = BufReader::new(File::open(path)?);
    let mut r = HeaderReader {
        inner: &mut file,
        path: display.clone(),
    };

    let magic = r.line("magic")?;
    if magic != HEADER_MAGIC {
        return Err(r.err("magic", format!("expected '{HEADER_MAGIC}', got '{magic}'")));
    }
    let num_classes: usize = r.keyed_parse("num_classes")?;
    let stage_widths = r.keyed_list("stage_widths")?;
    let skip_stages = r.keyed_list("skip_stages")?;
    let epochs: u32 = r.keyed_parse("epochs")?;
    let seed: u64 = r.keyed_parse("seed")?;
    let final_loss = match r.keyed("final_loss")?.as_str() {
        "none" => None,
        raw => Some(
            raw.parse::<f32>()
                .map_err(|e| r.err("final_loss", e.to_string()))?,
        ),
    };
    let digest = match r.keyed("config_sha256")?.as_str() {
        "-" => None,
        hex => Some(hex.to_string()),
    };
    let count: usize = r.keyed_parse("params")?;
    let sep = r.line("separator")?;
    if sep != "---" {
        return Err(r.err("separator", format!("expected '---', got '{sep}'")));
    }

    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.line(&format!("param[{i}].name"))?;
        let tensor = tnsr::read_tnsr(r.inner, &format!("{display}:{name}"))?;
        params.push((name, tensor));
    }

    let config = ModelConfig {
        num_classes,
        stage_widths,
        skip_stages,
    };
    Checkpoint::from_parts(
        config,
        params,
        TrainMeta {
            epochs,
            seed,
            final_loss,
        },
        digest,
    )
    .map_err(|e| match e {
        Error::InvalidConfig(msg) => Error::Parse {
            path: display.clone(),
            field: "params".to_string(),
            message: msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, predict, train};
    use crate::scene::{generate_dataset, SceneSpec};
    use tempfile::tempdir;

    fn trained_tiny() -> Checkpoint {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        };
        let data = generate_dataset(&spec, 6).unwrap();
        let cfg = ModelConfig {
            num_classes: 5,
            stage_widths: vec![4, 8],
            skip_stages: vec![1],
        };
        train(&build_model(&cfg, 5).unwrap(), &data, 2, 0.2, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cp = trained_tiny();
        save_checkpoint(&p, &cp).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, cp);
        // a second save of the reloaded model produces identical bytes
        let p2 = dir.path().join("m2.ckpt");
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn predictions_survive_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cp = trained_tiny();
        save_checkpoint(&p, &cp).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let spec = SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        };
        let x = &generate_dataset(&spec, 1).unwrap()[0].image;
        let a = predict(&cp, x).unwrap();
        let b = predict(&back, x).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cp = trained_tiny();
        save_checkpoint(&p, &cp).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn corrupt_header_names_field() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cp = trained_tiny();
        save_checkpoint(&p, &cp).unwrap();
        let text = std::fs::read(&p).unwrap();
        let curr = b"seed = ";
        let pos = text
            .windows(curr.len())
            .position(|w| w == curr)
            .unwrap();
        let mut bad = text.clone();
        bad[pos] = b'x'; // "xeed = ..."
        let badp = dir.path().join("bad.ckpt");
        std::fs::write(&badp, &bad).unwrap();
        let err = load_checkpoint(&badp).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }
}
