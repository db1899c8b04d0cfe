//! Physical domain and process parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular periodic domain plus the process parameters of a run.
///
/// `lx/ly/lz` are the physical extents in micrometers; `g_z` (K/μm) and `r_z`
/// (m/s) are the temperature gradient and pulling velocity; `g_max`/`r_max`
/// bound them and normalize the corresponding feature entries.
///
/// `l0x/l0y/l0z` are the reference lengths that normalize every dimensional
/// feature. They equal the extents of the domain the networks were fitted on,
/// not the current domain: running a wider domain simply yields coordinates
/// above 1, which the encoder tolerates because it only consumes relative
/// positions. For a stand-alone run they default to `lx/ly/lz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub g_z: f64,
    pub r_z: f64,
    pub g_max: f64,
    pub r_max: f64,
    #[serde(default)]
    pub l0x: f64,
    #[serde(default)]
    pub l0y: f64,
    #[serde(default)]
    pub l0z: f64,
}

impl DomainSpec {
    pub fn new(lx: f64, ly: f64, lz: f64, g_z: f64, r_z: f64, g_max: f64, r_max: f64) -> Self {
        DomainSpec {
            lx,
            ly,
            lz,
            g_z,
            r_z,
            g_max,
            r_max,
            l0x: lx,
            l0y: ly,
            l0z: lz,
        }
    }

    /// Override the normalization lengths with the fitting-domain extents.
    pub fn with_reference(mut self, l0x: f64, l0y: f64, l0z: f64) -> Self {
        self.l0x = l0x;
        self.l0y = l0y;
        self.l0z = l0z;
        self
    }

    /// Fill zero reference lengths (e.g. after deserializing an older
    /// document that omitted them) with the current extents.
    pub fn normalized_defaults(mut self) -> Self {
        if self.l0x <= 0.0 {
            self.l0x = self.lx;
        }
        if self.l0y <= 0.0 {
            self.l0y = self.ly;
        }
        if self.l0z <= 0.0 {
            self.l0z = self.lz;
        }
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lx > 0.0 && self.ly > 0.0 && self.lz > 0.0) {
            return Err(Error::config(format!(
                "domain lengths must be positive, got ({}, {}, {})",
                self.lx, self.ly, self.lz
            )));
        }
        if !(self.l0x > 0.0 && self.l0y > 0.0 && self.l0z > 0.0) {
            return Err(Error::config(format!(
                "reference lengths must be positive, got ({}, {}, {})",
                self.l0x, self.l0y, self.l0z
            )));
        }
        if !(self.g_z > 0.0 && self.g_z <= self.g_max) {
            return Err(Error::config(format!(
                "g_z must satisfy 0 < g_z <= g_max, got g_z={} g_max={}",
                self.g_z, self.g_max
            )));
        }
        if !(self.r_z > 0.0 && self.r_z <= self.r_max) {
            return Err(Error::config(format!(
                "r_z must satisfy 0 < r_z <= r_max, got r_z={} r_max={}",
                self.r_z, self.r_max
            )));
        }
        Ok(())
    }

    /// Current-to-reference scale factors for x/y coordinates.
    pub fn scale_x(&self) -> f64 {
        self.lx / self.l0x
    }

    pub fn scale_y(&self) -> f64 {
        self.ly / self.l0y
    }

    /// Cross-section area scale (current over reference).
    pub fn scale_area(&self) -> f64 {
        (self.lx * self.ly) / (self.l0x * self.l0y)
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reference_to_current() {
        let d = DomainSpec::new(40.0, 40.0, 50.0, 10.0, 2.0, 10.0, 2.0);
        assert_eq!(d.l0x, 40.0);
        assert!(d.check().is_ok());
        assert_eq!(d.scale_x(), 1.0);
    }

    #[test]
    fn wide_domain_scales_past_one() {
        let d = DomainSpec::new(120.0, 120.0, 50.0, 10.0, 2.0, 10.0, 2.0)
            .with_reference(40.0, 40.0, 50.0);
        assert_eq!(d.scale_x(), 3.0);
        assert_eq!(d.scale_area(), 9.0);
    }

    #[test]
    fn bad_process_params_rejected() {
        let d = DomainSpec::new(40.0, 40.0, 50.0, 11.0, 2.0, 10.0, 2.0);
        assert!(d.check().is_err());
        let d = DomainSpec::new(40.0, 40.0, 50.0, 10.0, 0.0, 10.0, 2.0);
        assert!(d.check().is_err());
    }
}
