/// Bilinear interpolation weights for a sub-pixel displacement.
///
/// With `mu = floor(mu) + frac`, tap `(i, j)` reads the source at
/// `base + (i, j)` with weight
/// `a[i][j] = ((1-i) + (2i-1) frac_y) * ((1-j) + (2j-1) frac_x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearStencil {
    pub base: (isize, isize),
    pub frac: (f64, f64),
    pub weights: [[f64; 2]; 2],
}

impl BilinearStencil {
    pub fn new(mu_y: f64, mu_x: f64) -> Self {
        let (by, bx) = (mu_y.floor(), mu_x.floor());
        let (fy, fx) = (mu_y - by, mu_x - bx);
        let wy = [1.0 - fy, fy];
        let wx = [1.0 - fx, fx];
        BilinearStencil {
            base: (by as isize, bx as isize),
            frac: (fy, fx),
            weights: [[wy[0] * wx[0], wy[0] * wx[1]], [wy[1] * wx[0], wy[1] * wx[1]]],
        }
    }

    /// `d a[i][j] / d mu_y`, the exact derivative inside a unit cell.
    pub fn d_weights_dy(&self) -> [[f64; 2]; 2] {
        let fx = self.frac.1;
        let wx = [1.0 - fx, fx];
        [[-wx[0], -wx[1]], [wx[0], wx[1]]]
    }

    /// `d a[i][j] / d mu_x`.
    pub fn d_weights_dx(&self) -> [[f64; 2]; 2] {
        let fy = self.frac.0;
        let wy = [1.0 - fy, fy];
        [[-wy[0], wy[0]], [-wy[1], wy[1]]]
    }

    /// Iterates `(i, j, weight)` over the four taps.
    pub fn taps(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..2).flat_map(move |i| (0..2).map(move |j| (i, j, self.weights[i][j])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integer_displacement_is_one_hot() {
        let s = BilinearStencil::new(2.0, -3.0);
        assert_eq!(s.base, (2, -3));
        assert_eq!(s.weights, [[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn midpoint() {
        let s = BilinearStencil::new(0.5, 0.0);
        assert_eq!(s.base, (0, 0));
        assert_eq!(s.weights, [[0.5, 0.0], [0.5, 0.0]]);
    }

    #[test]
    fn negative_fraction_uses_floor() {
        let s = BilinearStencil::new(-0.25, 1.75);
        assert_eq!(s.base, (-1, 1));
        assert!((s.frac.0 - 0.75).abs() < 1e-15);
        assert!((s.weights[1][1] - 0.75 * 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weights_are_a_partition_of_unity(my in -4.0f64..4.0, mx in -4.0f64..4.0) {
            let s = BilinearStencil::new(my, mx);
            let total: f64 = s.taps().map(|(_, _, a)| a).sum();
            prop_assert!(s.taps().all(|(_, _, a)| a >= 0.0));
            prop_assert!((total - 1.0).abs() <= 1e-15);
            for (i, j, a) in s.taps() {
                let (fy, fx) = s.frac;
                let want = ((1 - i) as f64 + (2.0 * i as f64 - 1.0) * fy)
                    * ((1 - j) as f64 + (2.0 * j as f64 - 1.0) * fx);
                prop_assert!((a - want).abs() < 1e-15);
            }
        }

        #[test]
        fn weight_derivatives_match_finite_differences(my in -3.9f64..3.9, mx in -3.9f64..3.9) {
            let fy = my - my.floor();
            let fx = mx - mx.floor();
            prop_assume!(fy > 0.01 && fy < 0.99 && fx > 0.01 && fx < 0.99);
            let s = BilinearStencil::new(my, mx);
            let h = 1e-7;
            let (py, my_) = (BilinearStencil::new(my + h, mx), BilinearStencil::new(my - h, mx));
            let (px, mx_) = (BilinearStencil::new(my, mx + h), BilinearStencil::new(my, mx - h));
            let (dy, dx) = (s.d_weights_dy(), s.d_weights_dx());
            for i in 0..2 {
                for j in 0..2 {
                    let ny = (py.weights[i][j] - my_.weights[i][j]) / (2.0 * h);
                    let nx = (px.weights[i][j] - mx_.weights[i][j]) / (2.0 * h);
                    prop_assert!((ny - dy[i][j]).abs() < 1e-6);
                    prop_assert!((nx - dx[i][j]).abs() < 1e-6);
                }
            }
        }
    }
}
