/// Serialize a 3×3 matrix as 9 row-major floats.
pub(crate) mod mat3_row_major {
    use crate::geometry::Mat3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let mut rows = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rows[3 * r + c] = m[(r, c)];
            }
        }
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[f64; 9]>::deserialize(d)?;
        Ok(Mat3::from_row_slice(&rows))
    }
}
