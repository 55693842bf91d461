//! Second-order central-difference operators on periodic grids, each held as
//! a 3x3 [`Kernel`] and applied channel by channel.

use crate::error::{Error, Result};
use crate::tensor_grid::{conv_periodic, GridField, Kernel};

#[derive(Debug, Clone, PartialEq)]
pub struct StencilSet {
    d_dx: Kernel,
    d_dy: Kernel,
    laplacian: Kernel,
    dx: f64,
    dy: f64,
}

impl StencilSet {
    pub fn new(dx: f64, dy: f64) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grid spacing must be positive, got dx = {dx}, dy = {dy}"
            )));
        }
        let hx = 1.0 / (2.0 * dx);
        let hy = 1.0 / (2.0 * dy);
        let d_dx = Kernel::stencil3([[0.0, 0.0, 0.0], [-hx, 0.0, hx], [0.0, 0.0, 0.0]]);
        let d_dy = Kernel::stencil3([[0.0, -hy, 0.0], [0.0, 0.0, 0.0], [0.0, hy, 0.0]]);
        let (ix, iy) = (1.0 / (dx * dx), 1.0 / (dy * dy));
        let laplacian = Kernel::stencil3([
            [0.0, iy, 0.0],
            [ix, -2.0 * ix - 2.0 * iy, ix],
            [0.0, iy, 0.0],
        ]);
        Ok(Self {
            d_dx,
            d_dy,
            laplacian,
            dx,
            dy,
        })
    }

    pub fn for_field(field: &GridField) -> Self {
        Self::new(field.dx(), field.dy()).expect("fields always carry positive spacing")
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn d_dx_kernel(&self) -> &Kernel {
        &self.d_dx
    }

    pub fn d_dy_kernel(&self) -> &Kernel {
        &self.d_dy
    }

    pub fn laplacian_kernel(&self) -> &Kernel {
        &self.laplacian
    }

    pub fn d_dx(&self, field: &GridField) -> Result<GridField> {
        self.check(field)?;
        depthwise(field, &self.d_dx)
    }

    pub fn d_dy(&self, field: &GridField) -> Result<GridField> {
        self.check(field)?;
        depthwise(field, &self.d_dy)
    }

    pub fn laplacian(&self, field: &GridField) -> Result<GridField> {
        self.check(field)?;
        depthwise(field, &self.laplacian)
    }

    pub fn gradient(&self, field: &GridField) -> Result<(GridField, GridField)> {
        Ok((self.d_dx(field)?, self.d_dy(field)?))
    }

    pub fn divergence(&self, vx: &GridField, vy: &GridField) -> Result<GridField> {
        self.d_dx(vx)?.add(&self.d_dy(vy)?)
    }

    /// `vx · ∂f/∂x + vy · ∂f/∂y`, products taken pointwise.
    pub fn advect(&self, field: &GridField, vx: &GridField, vy: &GridField) -> Result<GridField> {
        let fx = self.d_dx(field)?.mul(vx)?;
        let fy = self.d_dy(field)?.mul(vy)?;
        fx.add(&fy)
    }

    fn check(&self, field: &GridField) -> Result<()> {
        if field.dx() != self.dx || field.dy() != self.dy {
            return Err(Error::shape(
                "stencil",
                format!("spacing ({}, {})", self.dx, self.dy),
                format!("spacing ({}, {})", field.dx(), field.dy()),
            ));
        }
        Ok(())
    }
}

/// Applies a 1 -> 1 kernel to every channel independently.
pub fn depthwise(field: &GridField, kernel: &Kernel) -> Result<GridField> {
    if kernel.in_channels() != 1 || kernel.out_channels() != 1 {
        return Err(Error::InvalidKernel(
            "depthwise application needs a single-channel kernel".into(),
        ));
    }
    if field.channels() == 1 {
        return conv_periodic(field, kernel);
    }
    let mut data = Vec::with_capacity(field.data().len());
    for c in 0..field.channels() {
        let out = conv_periodic(&field.select_channels(c..c + 1)?, kernel)?;
        data.extend_from_slice(out.data());
    }
    Ok(field.with_data(field.channels(), data))
}
