//! L0 gradient minimization smoothing.
//!
//! Alternating half-quadratic scheme: the gradient field is hard-thresholded
//! against `lambda / beta`, then the image subproblem is solved exactly in
//! the Fourier domain with circular boundary conditions. `beta` starts at
//! `2 * lambda` and doubles each iteration (kappa = 2.0, at most 20
//! iterations). A weight of zero returns the input unchanged.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::raster::Image;

const KAPPA: f64 = 2.0;
const BETA_MAX: f64 = 1e5;
const MAX_ITERS: usize = 20;

struct Fft2 {
    planner: FftPlanner<f64>,
    h: usize,
    w: usize,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        Fft2 {
            planner: FftPlanner::new(),
            h,
            w,
        }
    }

    fn run(&mut self, data: &mut [Complex<f64>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let row_fft = if inverse {
            self.planner.plan_fft_inverse(w)
        } else {
            self.planner.plan_fft_forward(w)
        };
        for row in data.chunks_mut(w) {
            row_fft.process(row);
        }
        let col_fft = if inverse {
            self.planner.plan_fft_inverse(h)
        } else {
            self.planner.plan_fft_forward(h)
        };
        let mut col = vec![Complex::default(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = data[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                data[y * w + x] = col[y];
            }
        }
        if inverse {
            let scale = 1.0 / (h * w) as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Optical transfer function of a small kernel placed with its origin at
/// (0, 0) on an h x w grid (circular).
fn otf(fft: &mut Fft2, taps: &[((usize, usize), f64)], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut k = vec![Complex::default(); h * w];
    for &((dy, dx), v) in taps {
        k[(dy % h) * w + (dx % w)] = Complex::new(v, 0.0);
    }
    fft.run(&mut k, false);
    k
}

/// L0-gradient-minimization smoothing with the given weight (lambda).
pub fn l0_smooth(image: &Image, weight: f64) -> Image {
    assert!(weight >= 0.0, "smoothing weight must be non-negative");
    if weight == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let mut fft = Fft2::new(h, w);
    // forward difference: (conv S)(x) = S(x+1) - S(x), circular
    let otf_x = otf(&mut fft, &[((0, 0), -1.0), ((0, w - 1), 1.0)], h, w);
    let otf_y = otf(&mut fft, &[((0, 0), -1.0), ((h - 1, 0), 1.0)], h, w);
    let denom_base: Vec<f64> = otf_x
        .iter()
        .zip(&otf_y)
        .map(|(a, b)| a.norm_sqr() + b.norm_sqr())
        .collect();

    let mut out = Image::zeros(image.channels, h, w);
    for c in 0..image.channels {
        let plane = &image.data[c * n..(c + 1) * n];
        let mut fi: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.run(&mut fi, false);
        let mut s: Vec<f64> = plane.to_vec();
        let mut beta = 2.0 * weight;
        let mut iter = 0;
        while beta < BETA_MAX && iter < MAX_ITERS {
            // gradient subproblem: hard threshold
            let mut gx = vec![0.0; n];
            let mut gy = vec![0.0; n];
            let thresh = weight / beta;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let dx = s[y * w + (x + 1) % w] - s[i];
                    let dy = s[((y + 1) % h) * w + x] - s[i];
                    if dx * dx + dy * dy > thresh {
                        gx[i] = dx;
                        gy[i] = dy;
                    }
                }
            }
            // image subproblem in the Fourier domain
            let mut fh: Vec<Complex<f64>> = gx.iter().map(|&v| Complex::new(v, 0.0)).collect();
            let mut fv: Vec<Complex<f64>> = gy.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.run(&mut fh, false);
            fft.run(&mut fv, false);
            let mut fs = vec![Complex::default(); n];
            for i in 0..n {
                let num = fi[i] + (otf_x[i].conj() * fh[i] + otf_y[i].conj() * fv[i]) * beta;
                fs[i] = num / (1.0 + beta * denom_base[i]);
            }
            fft.run(&mut fs, true);
            for i in 0..n {
                s[i] = fs[i].re;
            }
            beta *= KAPPA;
            iter += 1;
        }
        out.data[c * n..(c + 1) * n].copy_from_slice(&s);
    }
    out
}

/// Number of pixels whose circular forward-difference gradient magnitude
/// exceeds `thresh`, summed over channels. Oracle for sparsity checks.
pub fn gradient_count(image: &Image, thresh: f64) -> usize {
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let mut count = 0;
    for c in 0..image.channels {
        let plane = &image.data[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dx = plane[y * w + (x + 1) % w] - plane[i];
                let dy = plane[((y + 1) % h) * w + x] - plane[i];
                if (dx * dx + dy * dy).sqrt() > thresh {
                    count += 1;
                }
            }
        }
    }
    count
}
