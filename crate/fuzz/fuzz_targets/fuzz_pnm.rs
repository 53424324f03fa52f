#![no_main]

use libfuzzer_sys::fuzz_target;

use contextseg::pnm::{self, PnmImage};

// decode must reject malformed PNM bytes with an error, never panic or
// overflow; anything it accepts must re-encode
fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pnm::decode(data) {
        match img {
            PnmImage::Rgb8 { w, h, data } => {
                pnm::encode_ppm8(w, h, &data).expect("decoded image must re-encode");
            }
            PnmImage::Gray8 { w, h, data } => {
                pnm::encode_pgm8(w, h, &data).expect("decoded image must re-encode");
            }
            PnmImage::Gray16 { w, h, data } => {
                pnm::encode_pgm16(w, h, &data).expect("decoded image must re-encode");
            }
        }
    }
});
