use serde::{Deserialize, Serialize};

use super::DataError;

/// Window length used for long clips, seconds.
pub const WINDOW_S: f64 = 10.0;
/// Hop between window starts, seconds.
pub const HOP_S: f64 = 5.0;

const GRID_EPS: f64 = 1e-9;

/// Sliding-window segmentation of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub duration_s: f64,
    pub windows: Vec<(f64, f64)>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// 10 s windows every 5 s; a final window anchored to the clip end covers any
/// remainder off the 5 s grid. Clips up to 10 s are a single window.
pub fn plan_windows(duration_s: f64) -> Result<WindowPlan, DataError> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(DataError::NonPositiveDuration(duration_s));
    }
    let mut windows = Vec::new();
    if duration_s <= WINDOW_S + GRID_EPS {
        windows.push((0.0, duration_s));
    } else {
        let mut k = 0u32;
        loop {
            let start = k as f64 * HOP_S;
            if start + WINDOW_S > duration_s + GRID_EPS {
                break;
            }
            windows.push((start, start + WINDOW_S));
            k += 1;
        }
        let last_end = windows.last().map_or(0.0, |w| w.1);
        if duration_s - last_end > GRID_EPS {
            windows.push((duration_s - WINDOW_S, duration_s));
        }
    }
    Ok(WindowPlan {
        duration_s,
        windows,
    })
}
