use std::path::{Path, PathBuf};

use grcvit::image::{generate, load_image};
use grcvit::{RgbImage, SyntheticKind, SyntheticSpec};
use rayon::prelude::*;

use crate::error::{fail, Code, CliResult, Tagged};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// One input image with a stable identifier (file path or synthetic spec).
pub struct Input {
    pub id: String,
    pub image: RgbImage,
}

/// Synthetic spec with its seed advanced by `offset`; seedless kinds are
/// returned unchanged.
fn reseeded(spec: SyntheticSpec, offset: u64) -> SyntheticSpec {
    let kind = match spec.kind {
        SyntheticKind::UniformNoise { seed } => SyntheticKind::UniformNoise { seed: seed.wrapping_add(offset) },
        SyntheticKind::TexturedClass { class, seed } => {
            SyntheticKind::TexturedClass { class, seed: seed.wrapping_add(offset) }
        }
        k => k,
    };
    SyntheticSpec { kind, ..spec }
}

/// `synth:SPEC` or `synth:SPEC*N`: N copies with seeds `seed, seed+1, ...`.
fn parse_synth(arg: &str) -> CliResult<Vec<SyntheticSpec>> {
    let (body, count) = match arg.rsplit_once('*') {
        Some((b, n)) => (b, n.parse::<usize>().tag(Code::Usage, format!("bad repeat count in {arg:?}"))?),
        None => (arg, 1),
    };
    let spec: SyntheticSpec = body.parse()?;
    Ok((0..count as u64).map(|i| reseeded(spec, i)).collect())
}

fn spec_id(spec: &SyntheticSpec) -> String {
    let body = match spec.kind {
        SyntheticKind::Constant { value } => format!("constant:{value}"),
        SyntheticKind::Checkerboard { period } => format!("checkerboard:{period}"),
        SyntheticKind::StepEdge => "step-edge".into(),
        SyntheticKind::UniformNoise { seed } => format!("noise:{seed}"),
        SyntheticKind::TexturedClass { class, seed } => format!("textured:{class}:{seed}"),
    };
    format!("synth:{body}@{}x{}", spec.width, spec.height)
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).tag(Code::Io, format!("reading directory {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Resolve `--input` plus any configured synthetic specs into images, in a
/// deterministic order. Files are decoded in parallel.
pub fn collect(input: Option<&str>, synthetic: &[SyntheticSpec]) -> CliResult<Vec<Input>> {
    let mut specs = Vec::new();
    let mut files = Vec::new();
    match input {
        Some(arg) if arg.starts_with("synth:") => specs.extend(parse_synth(&arg["synth:".len()..])?),
        Some(arg) => {
            let path = Path::new(arg);
            if path.is_dir() {
                files = list_images(path)?;
                if files.is_empty() {
                    return Err(fail(Code::Io, format!("no PNG/PGM/PPM images in {}", path.display())));
                }
            } else if path.is_file() {
                files.push(path.to_path_buf());
            } else {
                return Err(fail(Code::Io, format!("input {} does not exist", path.display())));
            }
        }
        None => {}
    }
    for s in synthetic {
        s.validate()?;
        specs.push(*s);
    }
    let mut out: Vec<Input> = files
        .par_iter()
        .map(|p| Ok(Input { id: p.display().to_string(), image: load_image(p)? }))
        .collect::<CliResult<_>>()?;
    out.extend(specs.iter().map(|s| Input { id: spec_id(s), image: generate(s).to_rgb() }));
    if out.is_empty() {
        return Err(fail(Code::Usage, "no input images (give --input or `synthetic` entries in --config)"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_synthetic_specs_advance_seeds() {
        let specs = parse_synth("noise:5@16x16*3").unwrap();
        let seeds: Vec<u64> = specs
            .iter()
            .map(|s| match s.kind {
                SyntheticKind::UniformNoise { seed } => seed,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(seeds, [5, 6, 7]);
        assert_eq!(parse_synth("constant:0.5@16x16*4").unwrap().len(), 4);
    }

    #[test]
    fn bad_specs_are_usage_errors() {
        assert_eq!(parse_synth("wobble").unwrap_err().code, Code::Usage);
        assert_eq!(parse_synth("noise:1*x").unwrap_err().code, Code::Usage);
    }

    #[test]
    fn missing_path_is_io_error() {
        let err = collect(Some("/definitely/not/here"), &[]).err().unwrap();
        assert_eq!(err.code, Code::Io);
    }

    #[test]
    fn ids_roundtrip_through_parser() {
        let s: SyntheticSpec = "textured:2:9@32x32".parse().unwrap();
        let id = spec_id(&s);
        let back: SyntheticSpec = id["synth:".len()..].parse().unwrap();
        assert_eq!(back, s);
    }
}
