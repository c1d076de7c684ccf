//! Plain-text episode files.
//!
//! One tab-separated record per line after a `#` header:
//!
//! ```text
//! # episode_id	seed	terminated	observations	actions	rewards
//! 0	17	1	0,2,5	1,0	0.25,-1.5
//! ```
//!
//! Lists are comma-separated; rewards use the shortest representation that
//! round-trips, so a write/read cycle is bit-exact.

use std::io::{BufRead, Write};

use super::{EnvError, Episode};

pub const HEADER: &str = "# episode_id\tseed\tterminated\tobservations\tactions\trewards";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub id: u64,
    pub seed: u64,
    pub episode: Episode,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_episodes<W: Write>(mut out: W, records: &[EpisodeRecord]) -> std::io::Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in records {
        let e = &r.episode;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.seed,
            u8::from(e.terminated),
            join(&e.observations),
            join(&e.actions),
            join(&e.rewards)
        )?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<Vec<T>, EnvError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|x| {
            x.parse().map_err(|_| EnvError::Parse {
                line,
                msg: format!("bad {what} entry `{x}`"),
            })
        })
        .collect()
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>, EnvError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| EnvError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(EnvError::Parse {
                line: lineno,
                msg: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |f: &str, what: &str| {
            f.parse::<u64>().map_err(|_| EnvError::Parse {
                line: lineno,
                msg: format!("bad {what} `{f}`"),
            })
        };
        let terminated = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(EnvError::Parse {
                    line: lineno,
                    msg: format!("terminated flag must be 0 or 1, got `{other}`"),
                })
            }
        };
        let episode = Episode {
            observations: parse_list(fields[3], lineno, "observation")?,
            actions: parse_list(fields[4], lineno, "action")?,
            rewards: parse_list(fields[5], lineno, "reward")?,
            terminated,
        };
        episode.validate().map_err(|e| EnvError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        records.push(EpisodeRecord {
            id: num(fields[0], "episode id")?,
            seed: num(fields[1], "seed")?,
            episode,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(
            eps in proptest::collection::vec(
                (any::<u64>(), proptest::collection::vec((0usize..50, 0usize..9, -1e6f64..1e6), 0..12), any::<bool>()),
                0..6,
            )
        ) {
            let records: Vec<EpisodeRecord> = eps
                .into_iter()
                .enumerate()
                .map(|(id, (seed, steps, terminated))| {
                    let mut e = Episode::new(0);
                    for (o, a, r) in steps {
                        e.observations.push(o);
                        e.actions.push(a);
                        e.rewards.push(r);
                    }
                    e.terminated = terminated;
                    EpisodeRecord { id: id as u64, seed, episode: e }
                })
                .collect();
            let mut buf = Vec::new();
            write_episodes(&mut buf, &records).unwrap();
            let back = read_episodes(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &records);
            let mut again = Vec::new();
            write_episodes(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn reports_line_numbers() {
        let text = format!("{HEADER}\n0\t1\t1\t0,1\t0\t1.5\n1\t1\t2\t0\t\t\n");
        match read_episodes(text.as_bytes()) {
            Err(EnvError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad_len = "0\t1\t1\t0\t0\t1.0\n";
        assert!(matches!(read_episodes(bad_len.as_bytes()), Err(EnvError::Parse { line: 1, .. })));
    }
}
