//! Line-oriented JSON model files: one header object, then one object per kernel.
//!
//! ```text
//! {"format_version":1,"image_width":64,"image_height":48,"coord_scale":64.0,"mode":"smoe","L":2}
//! {"mu":[0.25,0.5],"b":[8.0,0.0,8.0],"pi":0.5,"m":0.1}
//! {"mu":[0.75,0.5],"b":[8.0,0.0,8.0],"pi":0.5,"m":0.9}
//! ```
//!
//! Floats are written in shortest round-trip form, so `load(save(m)) == m` bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Domain, Kernel, MixtureModel, Mode};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    image_width: usize,
    image_height: usize,
    coord_scale: f64,
    mode: Mode,
    #[serde(rename = "L")]
    l: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    mu: [f64; 2],
    b: [f64; 3],
    pi: f64,
    m: f64,
}

pub fn to_string(model: &MixtureModel) -> Result<String> {
    let header = Header {
        format_version: FORMAT_VERSION,
        image_width: model.domain.image_width,
        image_height: model.domain.image_height,
        coord_scale: model.domain.coord_scale,
        mode: model.mode,
        l: model.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for k in &model.kernels {
        let rec = Record {
            mu: k.mu,
            b: k.b,
            pi: k.pi,
            m: k.m,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_line<'a, T: Deserialize<'a>>(text: &'a str, line: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn from_str(text: &str) -> Result<MixtureModel> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(Error::Parse {
        line: 1,
        column: 0,
        message: "missing header".into(),
    })?;
    let header: Header = parse_line(htext, hline)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: hline,
            column: 1,
            message: format!("unsupported format_version {}", header.format_version),
        });
    }
    let mut kernels = Vec::with_capacity(header.l);
    let mut last_line = hline;
    for (n, t) in lines {
        let r: Record = parse_line(t, n)?;
        kernels.push(Kernel {
            mu: r.mu,
            b: r.b,
            pi: r.pi,
            m: r.m,
        });
        last_line = n;
    }
    if kernels.len() != header.l {
        return Err(Error::Parse {
            line: last_line + 1,
            column: 1,
            message: format!("header declares {} kernels, found {}", header.l, kernels.len()),
        });
    }
    let domain = Domain {
        image_width: header.image_width,
        image_height: header.image_height,
        coord_scale: header.coord_scale,
    };
    MixtureModel::new(kernels, header.mode, domain)
}

pub fn save(model: &MixtureModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_string(model)?.as_bytes())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MixtureModel> {
    from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> MixtureModel {
        MixtureModel::new(
            vec![
                Kernel::radial([0.25, 0.5], 8.0, 0.5, 0.1),
                Kernel {
                    mu: [0.1 + 0.2, 1.0 / 3.0],
                    b: [7.123456789012345, -0.3, 1e-17],
                    pi: -2.5e-300,
                    m: 0.9,
                },
            ],
            Mode::SmoeGating,
            Domain::for_image(64, 48),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let m = sample();
        let text = to_string(&m).unwrap();
        let back = from_str(&text).unwrap();
        for (a, b) in m.kernels.iter().zip(&back.kernels) {
            assert_eq!(a.mu.map(f64::to_bits), b.mu.map(f64::to_bits));
            assert_eq!(a.b.map(f64::to_bits), b.b.map(f64::to_bits));
            assert_eq!(a.pi.to_bits(), b.pi.to_bits());
            assert_eq!(a.m.to_bits(), b.m.to_bits());
        }
        assert_eq!(back, m);
        assert_eq!(to_string(&back).unwrap(), text);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut m = sample();
        m.mode = Mode::RbfSum;
        save(&m, &p).unwrap();
        assert_eq!(load(&p).unwrap(), m);
    }

    #[test]
    fn corrupt_record_reports_position() {
        let text = to_string(&sample()).unwrap();
        let broken = text.replacen("\"pi\":0.5", "\"pi\":0.5x", 1);
        match from_str(&broken) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let text = to_string(&sample()).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_str(&truncated), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(from_str(""), Err(Error::Parse { line: 1, .. })));
        let bad_version = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(from_str(&bad_version), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_finite_floats_round_trip(
            vals in prop::collection::vec(-1e300f64..1e300, 7),
            tiny in -1e-300f64..1e-300,
        ) {
            let k = Kernel { mu: [vals[0], vals[1]], b: [vals[2], vals[3], tiny], pi: vals[5], m: vals[6] };
            let m = MixtureModel::new(vec![k], Mode::SmoeGating, Domain::for_image(3, 5)).unwrap();
            let text = to_string(&m).unwrap();
            let back = from_str(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(to_string(&back).unwrap(), text);
        }
    }
}
