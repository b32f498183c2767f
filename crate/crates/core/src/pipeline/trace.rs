//! Synthesis traces: the observable output of one inference pass, with
//! JSON, CSV, and SVG export for reports and contour plots.

use serde::{Deserialize, Serialize};

use crate::adapter::ControlParams;
use crate::corpus::Vad;
use crate::error::Result;
use crate::pipeline::ProsodyContour;
use crate::timbre::TimbreCode;

/// Wall-clock cost of each inference stage in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub adapter_ms: f64,
    pub flow_ms: f64,
    pub selection_ms: f64,
    pub render_ms: f64,
}

/// Everything one inference pass produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisTrace {
    pub utterance_id: String,
    pub character_id: String,
    pub control: ControlParams,
    /// Clip chosen by reference selection.
    pub selected_ref: String,
    /// The VAD point selection aimed at (its source is a synthesizer switch).
    pub vad_target: Vad,
    pub timbre: TimbreCode,
    pub contour: ProsodyContour,
    pub timing: StageTimings,
}

/// Equality deliberately skips `timing`: two runs over the same inputs must
/// compare equal even though wall clocks differ.
impl PartialEq for SynthesisTrace {
    fn eq(&self, other: &Self) -> bool {
        self.utterance_id == other.utterance_id
            && self.character_id == other.character_id
            && self.control == other.control
            && self.selected_ref == other.selected_ref
            && self.vad_target == other.vad_target
            && self.timbre == other.timbre
            && self.contour == other.contour
    }
}

impl SynthesisTrace {
    /// Frame bookkeeping, same rule as ground-truth contours.
    pub fn validate(&self) -> Result<()> {
        self.contour.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<SynthesisTrace> {
        Ok(serde_json::from_str(text)?)
    }

    /// One line per frame after the header, for external plotting.
    pub fn contour_csv(&self) -> String {
        let mut out = String::from("frame,f0,energy\n");
        for (i, (f, e)) in self.contour.f0.iter().zip(&self.contour.energy).enumerate() {
            out.push_str(&format!("{i},{f},{e}\n"));
        }
        out
    }

    /// Self-contained SVG: pitch track in the upper panel, energy below.
    pub fn contour_svg(&self) -> String {
        let f0_panel = polyline(&self.contour.f0, 20.0, 120.0);
        let e_panel = polyline(&self.contour.energy, 150.0, 80.0);
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 250\">\n",
                "<text x=\"20\" y=\"14\" font-size=\"11\">{id} f0 (Hz)</text>\n",
                "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\" points=\"{f0}\"/>\n",
                "<text x=\"20\" y=\"144\" font-size=\"11\">energy</text>\n",
                "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1\" points=\"{e}\"/>\n",
                "</svg>\n"
            ),
            id = self.utterance_id,
            f0 = f0_panel,
            e = e_panel,
        )
    }
}

/// Map a track onto a horizontal band: x spans the plot width, y fills
/// `[top, top + height]` with the track's own min/max as the range.
fn polyline(values: &[f64], top: f64, height: f64) -> String {
    let n = values.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = String::new();
    for (i, &v) in values.iter().enumerate() {
        let x = if n > 1 { 20.0 + 600.0 * i as f64 / (n - 1) as f64 } else { 320.0 };
        let y = top + height * (1.0 - (v - lo) / span);
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{x:.2},{y:.2}"));
    }
    out
}
