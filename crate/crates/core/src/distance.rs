//! Exact Euclidean distance transform (lower envelope of parabolas).

/// Squared Euclidean distance from every pixel to the nearest pixel with
/// `feature[i] == true`. Pixels are at integer coordinates; `f64::INFINITY`
/// when there are no features at all.
pub fn squared_edt(height: usize, width: usize, feature: &[bool]) -> Vec<f64> {
    assert_eq!(feature.len(), height * width);
    let mut grid: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; height.max(width)];
    let mut out = vec![0.0; height.max(width)];
    for r in 0..height {
        line[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        edt_1d(&line[..width], &mut out[..width]);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    for c in 0..width {
        for r in 0..height {
            line[r] = grid[r * width + c];
        }
        edt_1d(&line[..height], &mut out[..height]);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    grid
}

/// Distance from each pixel inside `region` to the nearest pixel outside it,
/// where everything beyond the grid border counts as outside. Zero outside.
pub fn inside_distance(height: usize, width: usize, region: &[bool]) -> Vec<f64> {
    let (ph, pw) = (height + 2, width + 2);
    let mut feature = vec![true; ph * pw];
    for r in 0..height {
        for c in 0..width {
            feature[(r + 1) * pw + c + 1] = !region[r * width + c];
        }
    }
    let d = squared_edt(ph, pw, &feature);
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = d[(r + 1) * pw + c + 1].sqrt();
        }
    }
    out
}

fn intersection(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    // vertices of the lower envelope and the boundaries between them
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        d.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in (first + 1)..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = intersection(f, q, v[k]);
        // z[0] is -inf, so this stops at k == 0 at the latest
        while s <= z[k] {
            k -= 1;
            s = intersection(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}
