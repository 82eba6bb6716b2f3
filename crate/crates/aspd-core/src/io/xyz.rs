//! Plain-text XYZ point cloud files: one `x y z` triple per line,
//! `#`-prefixed comment lines ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let file = File::open(path.as_ref())?;
    parse_xyz(BufReader::new(file))
}

pub fn parse_xyz(reader: impl BufRead) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut values = [0.0f64; 3];
        let mut count = 0;
        for token in trimmed.split_whitespace() {
            if count == 3 {
                count += 1;
                break;
            }
            values[count] = token.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("'{token}' is not a decimal real"),
            })?;
            count += 1;
        }
        if count != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 coordinates, found {count}"),
            });
        }
        points.push(values);
    }
    if points.is_empty() {
        return Err(Error::Contract("xyz file contains no points".into()));
    }
    PointCloud::new(points)
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    write_xyz(cloud, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn write_xyz(cloud: &PointCloud, writer: &mut impl Write) -> Result<()> {
    for p in cloud.points() {
        writeln!(writer, "{:.7} {:.7} {:.7}", p[0], p[1], p[2])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    #[test]
    fn parses_simple_file() {
        let cloud = parse_xyz(Cursor::new("0 0 0\n1 0 0\n")).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn skips_comments() {
        let cloud = parse_xyz(Cursor::new("# c\n1 2 3\n")).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points()[0], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn reports_arity_error_with_line_number() {
        let err = parse_xyz(Cursor::new("1 2\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_xyz(Cursor::new("0 0 0\n1 2 3 4\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_contract_error() {
        assert!(matches!(
            parse_xyz(Cursor::new("# only comments\n")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn roundtrip_within_decimal_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = PointCloud::new(
            (0..50)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_xyz(&cloud, &mut buf).unwrap();
        let back = parse_xyz(Cursor::new(&buf)).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() <= 1e-7);
            }
        }
        // Byte-stable output.
        let mut buf2 = Vec::new();
        write_xyz(&cloud, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
