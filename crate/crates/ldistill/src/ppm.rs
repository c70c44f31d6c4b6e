//! Binary PPM (P6) dumps of renders.

use std::path::Path;

use ldistill_core::ScoreTensor;

/// Maps `[-1, 1]` to `0..=255`, clamping outside. Channels 0..3 become RGB;
/// tensors with fewer than three channels are written as gray from channel 0.
pub fn encode_ppm(img: &ScoreTensor) -> Vec<u8> {
    let s = img.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.reserve(3 * s.plane());
    let rgb = if s.channels >= 3 { [0, 1, 2] } else { [0, 0, 0] };
    for i in 0..s.height {
        for j in 0..s.width {
            for c in rgb {
                out.push(to_byte(img.get(c, i, j)));
            }
        }
    }
    out
}

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &ScoreTensor) -> std::io::Result<()> {
    std::fs::write(path, encode_ppm(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldistill_core::Shape;

    #[test]
    fn header_and_pixels() {
        let img = ScoreTensor::from_fn(Shape::new(3, 1, 2), |c, _, j| match (c, j) {
            (0, 0) => -1.0,
            (0, 1) => 1.0,
            (1, _) => 0.0,
            _ => 5.0,
        });
        let ppm = encode_ppm(&img);
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(&ppm[header.len()..], &[0, 128, 255, 255, 128, 255]);
    }

    #[test]
    fn single_channel_is_gray() {
        let img = ScoreTensor::filled(Shape::new(1, 2, 2), 0.0);
        let ppm = encode_ppm(&img);
        assert_eq!(ppm.len(), b"P6\n2 2\n255\n".len() + 12);
        assert!(ppm[ppm.len() - 12..].iter().all(|&b| b == 128));
    }
}
