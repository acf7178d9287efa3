//! Extended XYZ structure files.
//!
//! ```text
//! 2
//! Lattice="10 0 0 0 10 0 0 0 10" Properties=species:S:1:pos:R:3:charge:R:1 pbc="T T T"
//! Na 0.0 0.0 0.0 1.0
//! Cl 2.8 0.0 0.0 -1.0
//! ```
//!
//! Species may be element symbols or atomic numbers. Without a `Properties`
//! key the columns are `species x y z`. Without `Lattice` the structure is
//! open; with it, `pbc` defaults to all true.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{AtomSystem, Mat3};

const SYMBOLS: [&str; 36] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
];

pub fn atomic_number(symbol: &str) -> Option<u32> {
    if let Ok(z) = symbol.parse::<u32>() {
        return (z >= 1).then_some(z);
    }
    SYMBOLS.iter().position(|s| *s == symbol).map(|i| i as u32 + 1)
}

pub fn symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Split the comment line into key=value pairs, honouring double quotes.
fn parse_comment(line: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let mut out = vec![];
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            // bare word: treat as a flag
            out.push((key, "T".into()));
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => value.push(c),
                    None => return Err(perr(lineno, format!("unterminated quote in value of {key}"))),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
enum Column {
    Species,
    Pos,
    Charge,
    Skip(usize),
}

fn parse_properties(spec: &str, lineno: usize) -> Result<Vec<Column>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(perr(lineno, format!("malformed Properties {spec:?}")));
    }
    let mut cols = vec![];
    for chunk in parts.chunks(3) {
        let n: usize = chunk[2]
            .parse()
            .map_err(|_| perr(lineno, format!("bad column count in Properties: {:?}", chunk[2])))?;
        let col = match (chunk[0].to_ascii_lowercase().as_str(), chunk[1], n) {
            ("species", "S", 1) | ("species", "I", 1) | ("z", "I", 1) | ("numbers", "I", 1) => Column::Species,
            ("pos", "R", 3) | ("positions", "R", 3) => Column::Pos,
            ("charge", "R", 1) | ("charges", "R", 1) | ("initial_charges", "R", 1) => Column::Charge,
            (_, _, n) => Column::Skip(n),
        };
        cols.push(col);
    }
    if !cols.contains(&Column::Species) || !cols.contains(&Column::Pos) {
        return Err(perr(lineno, "Properties must include species and pos"));
    }
    Ok(cols)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "T" | "True" | "true" | "1" => Some(true),
        "F" | "False" | "false" | "0" => Some(false),
        _ => None,
    }
}

/// Parse every frame of an extended XYZ stream.
pub fn parse_frames<R: Read>(input: R) -> Result<Vec<AtomSystem>> {
    let lines: Vec<String> = BufReader::new(input).lines().collect::<std::io::Result<_>>()?;
    let mut frames = vec![];
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let lineno = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("expected atom count, found {:?}", lines[i].trim())))?;
        if n == 0 {
            return Err(perr(lineno, "atom count must be positive"));
        }
        let comment = lines.get(i + 1).ok_or_else(|| perr(lineno + 1, "missing comment line"))?;
        let kv = parse_comment(comment, lineno + 1)?;
        let mut cell: Option<Mat3> = None;
        let mut pbc: Option<[bool; 3]> = None;
        let mut columns = vec![Column::Species, Column::Pos];
        for (k, v) in &kv {
            match k.as_str() {
                "Lattice" => {
                    let vals: Vec<f64> = v
                        .split_whitespace()
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| perr(lineno + 1, format!("bad Lattice {v:?}")))?;
                    if vals.len() != 9 {
                        return Err(perr(lineno + 1, format!("Lattice needs 9 numbers, got {}", vals.len())));
                    }
                    cell = Some([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]]);
                }
                "pbc" => {
                    let flags: Vec<bool> = v.split_whitespace().filter_map(parse_bool).collect();
                    if flags.len() != 3 {
                        return Err(perr(lineno + 1, format!("bad pbc {v:?}")));
                    }
                    pbc = Some([flags[0], flags[1], flags[2]]);
                }
                "Properties" => columns = parse_properties(v, lineno + 1)?,
                _ => {}
            }
        }
        let has_charge = columns.contains(&Column::Charge);
        let mut positions = Vec::with_capacity(n);
        let mut species = Vec::with_capacity(n);
        let mut charges = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 2 + a;
            let row = lines
                .get(ln)
                .ok_or_else(|| perr(ln + 1, format!("expected {n} atom rows, found {a}")))?;
            let toks: Vec<&str> = row.split_whitespace().collect();
            if toks.is_empty() {
                return Err(perr(ln + 1, format!("expected {n} atom rows, found {a}")));
            }
            let mut t = 0;
            let mut take = |k: usize| -> Result<&[&str]> {
                let s = toks.get(t..t + k).ok_or_else(|| perr(ln + 1, format!("too few columns: {row:?}")))?;
                t += k;
                Ok(s)
            };
            let mut pos = [0.0; 3];
            for col in &columns {
                match col {
                    Column::Species => {
                        let s = take(1)?[0];
                        species.push(atomic_number(s).ok_or_else(|| perr(ln + 1, format!("unknown species {s:?}")))?);
                    }
                    Column::Pos => {
                        for (d, s) in take(3)?.iter().enumerate() {
                            pos[d] = s.parse().map_err(|_| perr(ln + 1, format!("bad coordinate {s:?}")))?;
                        }
                    }
                    Column::Charge => {
                        let s = take(1)?[0];
                        charges.push(s.parse().map_err(|_| perr(ln + 1, format!("bad charge {s:?}")))?);
                    }
                    Column::Skip(k) => {
                        take(*k)?;
                    }
                }
            }
            if t != toks.len() {
                return Err(perr(ln + 1, format!("expected {t} columns, found {}", toks.len())));
            }
            positions.push(pos);
        }
        // a further non-empty line that is not a frame header means the count was short
        let next = i + 2 + n;
        if let Some(extra) = lines.get(next) {
            if !extra.trim().is_empty() && extra.trim().parse::<usize>().is_err() {
                return Err(perr(next + 1, format!("declared {n} atoms but more rows follow")));
            }
        }
        let pbc = pbc.unwrap_or(if cell.is_some() { [true; 3] } else { [false; 3] });
        let sys = AtomSystem::new(positions, species, has_charge.then_some(charges), cell, pbc)
            .map_err(|e| perr(lineno, e.to_string()))?;
        frames.push(sys);
        i = next;
    }
    if frames.is_empty() {
        return Err(perr(1, "empty file"));
    }
    Ok(frames)
}

/// Parse the first frame.
pub fn parse_structure<R: Read>(input: R) -> Result<AtomSystem> {
    Ok(parse_frames(input)?.swap_remove(0))
}

pub fn read_structure(path: &std::path::Path) -> Result<AtomSystem> {
    parse_structure(std::fs::File::open(path)?)
}

fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write one frame with 17 significant digits.
pub fn write_structure<W: Write>(mut out: W, system: &AtomSystem) -> Result<()> {
    writeln!(out, "{}", system.len())?;
    let mut header = vec![];
    if let Some(c) = &system.cell {
        let vals: Vec<String> = c.iter().flatten().map(|v| g17(*v)).collect();
        header.push(format!("Lattice=\"{}\"", vals.join(" ")));
    }
    let props = if system.charges.is_some() {
        "species:S:1:pos:R:3:charge:R:1"
    } else {
        "species:S:1:pos:R:3"
    };
    header.push(format!("Properties={props}"));
    let flag = |b: bool| if b { "T" } else { "F" };
    header.push(format!("pbc=\"{} {} {}\"", flag(system.pbc[0]), flag(system.pbc[1]), flag(system.pbc[2])));
    writeln!(out, "{}", header.join(" "))?;
    for (i, x) in system.positions.iter().enumerate() {
        let z = system.species[i];
        let name = symbol(z).map(str::to_string).unwrap_or_else(|| z.to_string());
        write!(out, "{name} {} {} {}", g17(x[0]), g17(x[1]), g17(x[2]))?;
        if let Some(q) = &system.charges {
            write!(out, " {}", g17(q[i]))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_structure_file(path: &std::path::Path, system: &AtomSystem) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_structure(&mut f, system)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::diagonal_cell;

    fn roundtrip(sys: &AtomSystem) -> AtomSystem {
        let mut buf = vec![];
        write_structure(&mut buf, sys).unwrap();
        parse_structure(buf.as_slice()).unwrap()
    }

    #[test]
    fn single_atom_roundtrip() {
        let sys = AtomSystem::molecule(vec![[0.1, 1.0 / 3.0, -2.5e-7]], vec![8], None).unwrap();
        assert_eq!(roundtrip(&sys), sys);
    }

    #[test]
    fn lattice_and_charges() {
        let text = "2\nLattice=\"10 0 0 0 10 0 0 0 12\" Properties=species:S:1:pos:R:3:charge:R:1 pbc=\"T T T\"\nNa 0 0 0 1.0\nCl 2.8 0 0 -1.0\n";
        let sys = parse_structure(text.as_bytes()).unwrap();
        assert_eq!(sys.cell, Some(diagonal_cell(10.0, 10.0, 12.0)));
        assert_eq!(sys.charges, Some(vec![1.0, -1.0]));
        assert_eq!(sys.species, vec![11, 17]);
        assert_eq!(roundtrip(&sys), sys);
    }

    #[test]
    fn count_mismatch_names_the_line() {
        let short = "3\ncomment\nH 0 0 0\nH 1 0 0\n";
        match parse_structure(short.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let long = "1\n\nH 0 0 0\nH 1 0 0\n";
        assert!(matches!(parse_structure(long.as_bytes()), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_structure("x\n\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        let lat = "1\nLattice=\"1 0 0 0 1\"\nH 0 0 0\n";
        assert!(matches!(parse_structure(lat.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let coord = "1\n\nH 0 zero 0\n";
        assert!(matches!(parse_structure(coord.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn numeric_species_and_multiple_frames() {
        let text = "1\n\n1 0 0 0\n1\n\n8 1 1 1\n";
        let frames = parse_frames(text.as_bytes()).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].species, vec![8]);
    }
}
