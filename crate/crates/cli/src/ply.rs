//! ASCII PLY mesh writing and reading. Coordinates are printed with nine
//! significant digits, enough to round-trip any 32-bit float.

use std::fs;
use std::path::Path;
use thiserror::Error;
use vgan_core::reconstruct::Mesh;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> PlyError {
    PlyError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<(), PlyError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str(&format!("element face {}\n", mesh.triangles.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_ply(path: &Path) -> Result<Mesh, PlyError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut next = || -> Result<(usize, &str), PlyError> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or(PlyError::Parse {
                line: 0,
                message: "unexpected end of file".into(),
            })
    };
    let expect = |got: (usize, &str), want: &str| -> Result<(), PlyError> {
        if got.1.trim() != want {
            return Err(PlyError::Parse {
                line: got.0,
                message: format!("expected `{want}`, got `{}`", got.1),
            });
        }
        Ok(())
    };
    expect(next()?, "ply")?;
    expect(next()?, "format ascii 1.0")?;
    let (vline, vdecl) = next()?;
    let n_vertices: usize = vdecl
        .trim()
        .strip_prefix("element vertex ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PlyError::Parse {
            line: vline,
            message: "expected `element vertex N`".into(),
        })?;
    expect(next()?, "property float x")?;
    expect(next()?, "property float y")?;
    expect(next()?, "property float z")?;
    let (fline, fdecl) = next()?;
    let n_faces: usize = fdecl
        .trim()
        .strip_prefix("element face ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PlyError::Parse {
            line: fline,
            message: "expected `element face M`".into(),
        })?;
    expect(next()?, "property list uchar int vertex_indices")?;
    expect(next()?, "end_header")?;

    let mut mesh = Mesh::default();
    for _ in 0..n_vertices {
        let (line, text) = next()?;
        let parts: Vec<f32> = text
            .split_whitespace()
            .map(|p| p.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| PlyError::Parse {
                line,
                message: "bad vertex coordinate".into(),
            })?;
        if parts.len() != 3 {
            return Err(PlyError::Parse {
                line,
                message: format!("expected 3 coordinates, got {}", parts.len()),
            });
        }
        mesh.vertices.push([parts[0], parts[1], parts[2]]);
    }
    for _ in 0..n_faces {
        let (line, text) = next()?;
        let parts: Vec<u32> = text
            .split_whitespace()
            .map(|p| p.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| PlyError::Parse {
                line,
                message: "bad face index".into(),
            })?;
        if parts.len() != 4 || parts[0] != 3 {
            return Err(PlyError::Parse {
                line,
                message: "expected `3 a b c` face record".into(),
            });
        }
        for &i in &parts[1..] {
            if i as usize >= n_vertices {
                return Err(PlyError::Parse {
                    line,
                    message: format!("vertex index {i} out of range"),
                });
            }
        }
        mesh.triangles.push([parts[1], parts[2], parts[3]]);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.5, 0.25, -3.75],
                [0.1, 0.2, 0.3],
                [1.0e-7, -123456.78, 0.5],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        let mesh = sample_mesh();
        write_ply(&mesh, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back, mesh);
    }

    #[test]
    fn header_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        write_ply(&sample_mesh(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header: Vec<&str> = text.lines().take(10).collect();
        assert_eq!(
            header,
            vec![
                "ply",
                "format ascii 1.0",
                "element vertex 4",
                "property float x",
                "property float y",
                "property float z",
                "element face 2",
                "property list uchar int vertex_indices",
                "end_header",
                "0.00000000e0 0.00000000e0 0.00000000e0",
            ]
        );
    }

    #[test]
    fn empty_mesh_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_ply(&Mesh::default(), &path).unwrap();
        assert_eq!(read_ply(&path).unwrap(), Mesh::default());
    }

    #[test]
    fn out_of_range_face_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n\
             property float y\nproperty float z\nelement face 1\n\
             property list uchar int vertex_indices\nend_header\n\
             0 0 0\n3 0 0 5\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(PlyError::Parse { .. })));
    }
}
