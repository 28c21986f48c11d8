//! 8-bit binary PGM previews (P5), mapping [-1, 1] linearly to [0, 255].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::field::Field;
use crate::{Error, Result};

pub fn write_pgm(path: &Path, f: &Field) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", f.width(), f.height())?;
        let bytes: Vec<u8> = f
            .data()
            .iter()
            .map(|&v| {
                let scaled = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
                scaled.round() as u8
            })
            .collect();
        w.write_all(&bytes)?;
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_extremes() {
        let f = Field::from_vec(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        write_pgm(&path, &f).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0u8, 128, 255]);
    }
}
