use crate::error::{Error, Result};

/// Integer class-id map, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height * width != labels.len() || height == 0 || width == 0 {
            return Err(Error::dim(
                "Mask::new",
                "labels",
                height * width,
                labels.len(),
            ));
        }
        Ok(Mask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Mask {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::contract(format!(
                "label {l} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts.
    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Nearest-neighbour downsampling by an integer factor: output pixel
    /// `(i, j)` copies input pixel `(i·f + f/2, j·f + f/2)`.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::contract(format!(
                "cannot downsample {}x{} mask by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let labels = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i * factor + off, j * factor + off))
            .collect();
        Ok(Mask {
            height: h,
            width: w,
            labels,
        })
    }
}
