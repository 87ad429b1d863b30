//! Per-pixel class prediction for a single RGB image.

use gcnet_core::network::{Network, INPUT_MULTIPLE};
use gcnet_core::ops::{argmax_channel, bilinear_resize};
use gcnet_core::train::rgb_to_tensor;
use gcnet_core::Real;

use crate::image::Rgb;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    /// Set when the input had to be resized to fit the network.
    pub warning: Option<String>,
}

fn round_up(v: usize) -> usize {
    v.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE
}

/// Labels every pixel with its highest-scoring class, ties going to the lower
/// index. Inputs whose sides are not multiples of 64 are bilinearly resized
/// up for the forward pass and the logits resized back to the input size.
pub fn segment<T: Real>(net: &Network<T>, img: &Rgb) -> gcnet_core::Result<Segmentation> {
    if net.num_classes() > 255 {
        return Err(gcnet_core::Error::Invalid(format!("{} classes do not fit in an 8-bit label map", net.num_classes())));
    }
    let (h, w) = (img.height, img.width);
    let x = rgb_to_tensor::<T>(&img.data, h, w)?;
    let (ph, pw) = (round_up(h), round_up(w));
    let warning = (ph != h || pw != w).then(|| format!("input {w}x{h} is not a multiple of {INPUT_MULTIPLE}; resized to {pw}x{ph} for inference"));
    let x = if warning.is_some() { bilinear_resize(&x, ph, pw)? } else { x };
    let mut logits = net.forward(&x)?;
    if warning.is_some() {
        logits = bilinear_resize(&logits, h, w)?;
    }
    let labels = argmax_channel(&logits).data.iter().map(|&c| c as u8).collect();
    Ok(Segmentation { width: w, height: h, labels, warning })
}
