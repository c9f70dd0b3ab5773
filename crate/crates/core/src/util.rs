use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of bits needed to represent `v` as an unsigned integer.
pub(crate) fn bits_for(v: u64) -> u32 {
    64 - v.leading_zeros()
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_owned());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Round-half-to-even of `num / 2^shift` for `shift > 0`.
pub(crate) fn shr_round_half_even(num: i128, shift: u32) -> i128 {
    if shift == 0 {
        return num;
    }
    if shift >= 127 {
        return 0;
    }
    let floor = num >> shift;
    let rem = num - (floor << shift);
    let half = 1i128 << (shift - 1);
    match rem.cmp(&half) {
        std::cmp::Ordering::Less => floor,
        std::cmp::Ordering::Greater => floor + 1,
        std::cmp::Ordering::Equal => {
            if floor & 1 == 0 {
                floor
            } else {
                floor + 1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits() {
        assert_eq!(bits_for(0), 0);
        assert_eq!(bits_for(1), 1);
        assert_eq!(bits_for(255), 8);
        assert_eq!(bits_for(256), 9);
    }

    #[test]
    fn half_even() {
        assert_eq!(shr_round_half_even(5, 1), 2);
        assert_eq!(shr_round_half_even(7, 1), 4);
        assert_eq!(shr_round_half_even(-5, 1), -2);
        assert_eq!(shr_round_half_even(-7, 1), -4);
        assert_eq!(shr_round_half_even(6, 2), 2);
        assert_eq!(shr_round_half_even(9, 2), 2);
        assert_eq!(shr_round_half_even(11, 2), 3);
    }
}
