//! Feature vectors for the RT and EC detectors.

use serde::{Deserialize, Serialize};

use super::DetectionConfig;
use crate::error::{Error, Result};
use crate::graph::{EdgeHistory, MINUTES_PER_DAY, MINUTES_PER_WEEK};
use crate::stats::{self, pearson, three_sigma_outliers};

pub const RT_FEATURES: usize = 12;
pub const EC_FEATURES: usize = 5;
const RATIO_SENTINEL: f64 = 1e6;

/// Historical periods the RT detection window is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComparisonPeriod {
    LastHour,
    SameHourPreviousDay,
    SameHourPreviousWeek,
}

impl ComparisonPeriod {
    pub const ALL: [ComparisonPeriod; 3] = [
        ComparisonPeriod::LastHour,
        ComparisonPeriod::SameHourPreviousDay,
        ComparisonPeriod::SameHourPreviousWeek,
    ];

    /// Minutes between the incident and the end of the period. The last hour
    /// ends where the detection window begins.
    pub fn offset(self, detection_window: usize) -> i64 {
        match self {
            ComparisonPeriod::LastHour => detection_window as i64,
            ComparisonPeriod::SameHourPreviousDay => MINUTES_PER_DAY,
            ComparisonPeriod::SameHourPreviousWeek => MINUTES_PER_WEEK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtFeatureVector {
    /// Per period: over_max_count, delta_of_max, over_avg_count, ratio_of_avg.
    pub values: [f64; RT_FEATURES],
    /// Set when a comparison period was replaced by the last hour.
    pub degraded: bool,
}

impl RtFeatureVector {
    pub fn period(&self, p: ComparisonPeriod) -> &[f64] {
        let i = ComparisonPeriod::ALL.iter().position(|q| *q == p).unwrap();
        &self.values[4 * i..4 * i + 4]
    }

    pub fn max_ratio_of_avg(&self) -> f64 {
        (0..3).map(|i| self.values[4 * i + 3]).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcFeatureVector {
    /// prev_day_delta_outlier, prev_minute_delta_outlier, rt_over_threshold,
    /// max_error_rate, ec_rt_correlation.
    pub values: [f64; EC_FEATURES],
    pub degraded: bool,
}

impl EcFeatureVector {
    pub fn prev_day_delta_outlier(&self) -> f64 {
        self.values[0]
    }
    pub fn prev_minute_delta_outlier(&self) -> f64 {
        self.values[1]
    }
    pub fn rt_over_threshold(&self) -> f64 {
        self.values[2]
    }
    pub fn max_error_rate(&self) -> f64 {
        self.values[3]
    }
    pub fn ec_rt_correlation(&self) -> f64 {
        self.values[4]
    }

    /// Any sign of errors rising in the detection window.
    pub fn has_error_evidence(&self) -> bool {
        self.values[0] > 0.0 || self.values[1] > 0.0 || self.values[3] > 0.0
    }
}

/// The four per-period RT features for detection-window values `current`
/// against comparison values `period`.
pub fn rt_period_features(current: &[f64], period: &[f64], ma_window: usize) -> Result<[f64; 4]> {
    if current.is_empty() {
        return Err(Error::invalid("detection window is empty"));
    }
    let p_max = stats::max(period);
    let c_max = stats::max(current);
    let m = stats::max(&stats::moving_average(period, ma_window)?);
    let c_mean = stats::mean(current);
    let over_max = current.iter().filter(|&&c| c > p_max).count() as f64;
    let over_avg = current.iter().filter(|&&c| c > m).count() as f64;
    let ratio = if m == 0.0 {
        if c_mean == 0.0 {
            0.0
        } else {
            RATIO_SENTINEL
        }
    } else {
        c_mean / m
    };
    Ok([over_max, c_max - p_max, over_avg, ratio])
}

fn check_window(h: &EdgeHistory, cfg: &DetectionConfig) -> Result<()> {
    if cfg.detection_window_minutes == 0 || cfg.detection_window_minutes > h.metric_window {
        return Err(Error::Config(format!(
            "detection window {} must be in 1..={}",
            cfg.detection_window_minutes, h.metric_window
        )));
    }
    Ok(())
}

/// RT features, or `None` when the edge has no data before the detection
/// window (the detector then skips the edge).
pub fn extract_rt_features(h: &EdgeHistory, cfg: &DetectionConfig) -> Result<Option<RtFeatureVector>> {
    check_window(h, cfg)?;
    let dw = cfg.detection_window_minutes;
    if !h.has_data_before(h.incident_minute - dw as i64) {
        return Ok(None);
    }
    let current = h.recent_range(dw, 0);
    let last_hour = h.recent_range(h.metric_window, dw);
    let mut values = [0.0; RT_FEATURES];
    let mut degraded = false;
    for (i, period) in ComparisonPeriod::ALL.iter().enumerate() {
        let series = match period {
            ComparisonPeriod::LastHour => Some(last_hour),
            ComparisonPeriod::SameHourPreviousDay => h.prev_day.as_ref().map(|s| &s.values[..]),
            ComparisonPeriod::SameHourPreviousWeek => h.prev_week.as_ref().map(|s| &s.values[..]),
        };
        let series = series.unwrap_or_else(|| {
            degraded = true;
            last_hour
        });
        let f = rt_period_features(current, series, cfg.moving_average_window)?;
        values[4 * i..4 * i + 4].copy_from_slice(&f);
    }
    if degraded {
        log::debug!("RT features degraded: short history");
    }
    Ok(Some(RtFeatureVector { values, degraded }))
}

/// Mean of the 3-sigma outliers among the last `probe_len` deltas, using
/// all deltas as reference; 0 if there are none.
fn delta_outlier_mean(deltas: &[f64], probe_len: usize) -> Result<f64> {
    let probe = &deltas[deltas.len() - probe_len..];
    let out = three_sigma_outliers(deltas, probe)?;
    if out.is_empty() {
        return Ok(0.0);
    }
    Ok(out.iter().map(|(_, v)| v).sum::<f64>() / out.len() as f64)
}

/// EC features from the edge's EC history (with request counts) and RT
/// history. `None` when the edge has no data before the detection window.
pub fn extract_ec_features(
    ec: &EdgeHistory,
    rt: &EdgeHistory,
    cfg: &DetectionConfig,
) -> Result<Option<EcFeatureVector>> {
    check_window(ec, cfg)?;
    let dw = cfg.detection_window_minutes;
    let mw = ec.metric_window;
    if !ec.has_data_before(ec.incident_minute - dw as i64) {
        return Ok(None);
    }
    let requests = ec
        .recent_requests
        .as_ref()
        .ok_or_else(|| Error::invalid("EC history carries no request counts"))?;

    let hour = ec.recent_range(mw, 0);
    let (prev, degraded) = match &ec.prev_day {
        Some(s) => (&s.values[..], false),
        None => (ec.recent_range(mw, mw), true),
    };
    let day_deltas: Vec<f64> = hour.iter().zip(prev).map(|(a, b)| a - b).collect();
    let prev_day = delta_outlier_mean(&day_deltas, dw)?;

    let extended = ec.recent_range(mw + 1, 0);
    let minute_deltas: Vec<f64> = extended.windows(2).map(|w| w[1] - w[0]).collect();
    let prev_minute = delta_outlier_mean(&minute_deltas, dw)?;

    let rt_window = rt.recent_range(dw, 0);
    let rt_over = if stats::mean(rt_window) > cfg.rt_threshold_ms {
        1.0
    } else {
        0.0
    };

    let ec_window = ec.recent_range(dw, 0);
    let end = ec.incident_minute;
    let req_window = requests
        .slice_minutes(end - dw as i64, end)
        .expect("requests aligned with recent span");
    let max_rate = ec_window
        .iter()
        .zip(req_window)
        .map(|(e, r)| if *r > 0.0 { e / r } else { 0.0 })
        .fold(0.0, f64::max);

    let corr = if dw >= 2 { pearson(ec_window, rt_window)? } else { 0.0 };
    Ok(Some(EcFeatureVector {
        values: [prev_day, prev_minute, rt_over, max_rate, corr],
        degraded,
    }))
}
