//! Extended XYZ trajectories.
//!
//! Per frame: the atom count, a comment line of `key=value` pairs
//! (`Properties=... energy=... dt=... frame=...`), then one line per atom:
//! `symbol x y z fx fy fz [vx vy vz]`. Reals are written with 17
//! significant digits, so a write/read/write cycle is byte-identical and
//! every value survives bit-exactly.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{atomic_number, element_symbol, AtomicSystem};
use crate::sim::{Frame, Trajectory};
use crate::vec3::Vec3;

/// One parsed frame. Forces and energy are optional so that bare
/// structures can be read as initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzFrame {
    pub system: AtomicSystem,
    pub energy: Option<f64>,
    pub forces: Option<Vec<Vec3>>,
    /// Comment-line pairs in file order.
    pub info: Vec<(String, String)>,
}

impl XyzFrame {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.info.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_frame<W: Write>(mut w: W, frame: &Frame, dt: f64, index: usize) -> Result<()> {
    let s = &frame.system;
    let vel = s.velocities.as_ref();
    let props = if vel.is_some() {
        "species:S:1:pos:R:3:forces:R:3:velo:R:3"
    } else {
        "species:S:1:pos:R:3:forces:R:3"
    };
    writeln!(w, "{}", s.len())?;
    writeln!(
        w,
        "Properties={props} energy={} dt={} frame={index}",
        real(frame.energy),
        real(dt)
    )?;
    for i in 0..s.len() {
        let sym = element_symbol(s.atomic_numbers[i])
            .ok_or_else(|| Error::OutOfRange(format!("no symbol for Z = {}", s.atomic_numbers[i])))?;
        let mut line = String::from(sym);
        let mut push = |v: &Vec3| {
            for x in v {
                line.push(' ');
                line.push_str(&real(*x));
            }
        };
        push(&s.positions[i]);
        push(&frame.forces[i]);
        if let Some(v) = vel {
            push(&v[i]);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    for (i, f) in traj.frames.iter().enumerate() {
        write_frame(&mut w, f, traj.dt, i)?;
    }
    Ok(())
}

pub fn to_string(traj: &Trajectory) -> Result<String> {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, traj)?;
    Ok(String::from_utf8(buf).expect("ascii output"))
}

fn parse_info(line: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut rest = line.trim();
    while !rest.is_empty() {
        let eq = rest.find('=').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected key=value in '{rest}'"),
        })?;
        let key = rest[..eq].trim().to_string();
        let after = &rest[eq + 1..];
        let (value, next) = if let Some(q) = after.strip_prefix('"') {
            let end = q.find('"').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "unterminated quote".into(),
            })?;
            (q[..end].to_string(), &q[end + 1..])
        } else {
            let end = after.find(char::is_whitespace).unwrap_or(after.len());
            (after[..end].to_string(), &after[end..])
        };
        out.push((key, value));
        rest = next.trim_start();
    }
    Ok(out)
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: '{tok}'"),
    })
}

/// Parses every frame in `text`. Atom lines may carry 3 (positions),
/// 6 (plus forces) or 9 (plus velocities) numbers.
pub fn parse(text: &str) -> Result<Vec<XyzFrame>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let n: usize = lines[i].trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("expected an atom count, found '{}'", lines[i]),
        })?;
        if i + 2 + n > lines.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("frame declares {n} atoms but the file ends early"),
            });
        }
        let info = parse_info(lines[i + 1], i + 2)?;
        let mut z = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        let mut width = None;
        for a in 0..n {
            let ln = i + 3 + a;
            let toks: Vec<&str> = lines[i + 2 + a].split_whitespace().collect();
            if !matches!(toks.len(), 4 | 7 | 10) || width.is_some_and(|w| w != toks.len()) {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("unexpected column count {}", toks.len()),
                });
            }
            width = Some(toks.len());
            z.push(atomic_number(toks[0]).ok_or_else(|| Error::Parse {
                line: ln,
                msg: format!("unknown element '{}'", toks[0]),
            })?);
            let mut nums = [0.0; 9];
            for (k, t) in toks[1..].iter().enumerate() {
                nums[k] = parse_f64(t, ln)?;
            }
            pos.push([nums[0], nums[1], nums[2]]);
            if toks.len() >= 7 {
                forces.push([nums[3], nums[4], nums[5]]);
            }
            if toks.len() == 10 {
                vel.push([nums[6], nums[7], nums[8]]);
            }
        }
        let mut system = AtomicSystem::new(z, pos).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if width == Some(10) {
            system.velocities = Some(vel);
        }
        let energy = info
            .iter()
            .find(|(k, _)| k == "energy")
            .map(|(_, v)| parse_f64(v, i + 2))
            .transpose()?;
        frames.push(XyzFrame {
            system,
            energy,
            forces: (width.unwrap_or(4) >= 7).then_some(forces),
            info,
        });
        i += 2 + n;
    }
    Ok(frames)
}

/// A labelled trajectory: every frame needs an energy and forces, and the
/// first frame's `dt`.
pub fn read_trajectory(text: &str) -> Result<Trajectory> {
    let parsed = parse(text)?;
    let dt = match parsed.first().and_then(|f| f.get("dt")) {
        Some(v) => parse_f64(v, 2)?,
        None => return Err(Error::Parse { line: 2, msg: "missing dt".into() }),
    };
    let mut frames = Vec::with_capacity(parsed.len());
    for (i, f) in parsed.into_iter().enumerate() {
        let missing = |what: &str| Error::Invalid(format!("frame {i} has no {what}"));
        frames.push(Frame {
            energy: f.energy.ok_or_else(|| missing("energy"))?,
            forces: f.forces.ok_or_else(|| missing("forces"))?,
            system: f.system,
            stats: None,
        });
    }
    let t = Trajectory {
        frames,
        dt,
        truncated: None,
    };
    t.validate()?;
    Ok(t)
}

/// Structures only; labels are ignored.
pub fn read_systems(text: &str) -> Result<Vec<AtomicSystem>> {
    Ok(parse(text)?.into_iter().map(|f| f.system).collect())
}

pub fn load_trajectory<P: AsRef<Path>>(path: P) -> Result<Trajectory> {
    read_trajectory(&std::fs::read_to_string(path)?)
}

pub fn load_systems<P: AsRef<Path>>(path: P) -> Result<Vec<AtomicSystem>> {
    read_systems(&std::fs::read_to_string(path)?)
}

pub fn save_trajectory<P: AsRef<Path>>(path: P, traj: &Trajectory) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory(f, traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_dataset, DatasetSpec, OracleSystem};

    fn sample() -> Trajectory {
        let o = OracleSystem::preset("formaldehyde").unwrap();
        let spec = DatasetSpec {
            frames: 5,
            equilibration: 3,
            ..Default::default()
        };
        gen_dataset(&o.potential, &o.system().unwrap(), &spec).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let text = to_string(&t).unwrap();
        let back = read_trajectory(&text).unwrap();
        assert_eq!(back.frames.len(), t.frames.len());
        for (a, b) in t.frames.iter().zip(&back.frames) {
            assert_eq!(a.energy.to_bits(), b.energy.to_bits());
            let bits = |v: &[Vec3]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.system.positions), bits(&b.system.positions));
            assert_eq!(bits(&a.forces), bits(&b.forces));
            assert_eq!(
                bits(a.system.velocities.as_ref().unwrap()),
                bits(b.system.velocities.as_ref().unwrap())
            );
        }
        assert_eq!(back.dt.to_bits(), t.dt.to_bits());
        assert_eq!(to_string(&back).unwrap(), text);
    }

    #[test]
    fn reads_bare_structures_and_quoted_values() {
        let text = "2\nname=\"two atoms\" pbc=F\nH 0 0 0\nH 0.74 0 0\n";
        let f = parse(text).unwrap();
        assert_eq!(f[0].get("name"), Some("two atoms"));
        assert!(f[0].forces.is_none() && f[0].energy.is_none());
        assert_eq!(read_systems(text).unwrap()[0].positions[1], [0.74, 0.0, 0.0]);
        assert!(read_trajectory(text).is_err());
    }

    #[test]
    fn malformed_input_reports_line() {
        for bad in ["x\n", "2\nenergy=1\nH 0 0 0\n", "1\nenergy=1\nXx 0 0 0\n", "1\nenergy=1\nH 0 0\n", "1\nenergy=1\nH 0 0 q\n"] {
            assert!(matches!(parse(bad), Err(Error::Parse { .. })), "{bad:?}");
        }
    }
}
