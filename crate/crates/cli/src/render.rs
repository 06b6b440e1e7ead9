//! Millimeter-paper snippet renderer.
//!
//! One SVG user unit is one millimeter. The trace draws at the clinical
//! scales: 25 mm/s horizontally and 10 mm/mV vertically, over a 1 mm grid
//! with major lines at 1 second spacing. Amplitudes beyond the +/- 2 mV
//! strip are clamped to the paper edge.

use ecgkit::error::{Error, Result};
use ecgkit::preprocess::estimate_heart_rate;
use ecgkit::EcgTrace;

const MM_PER_SECOND: f64 = 25.0;
const MM_PER_MV: f64 = 10.0;
const AMPLITUDE_MV: f64 = 2.0; // strip covers -2..+2 mV
const MARGIN_MM: f64 = 10.0;
const HEADER_MM: f64 = 8.0;
const SNIPPET_SECONDS: f64 = 8.0;

/// Render an 8 second chunk as a millimeter-paper SVG.
pub fn render_snippet(trace: &EcgTrace) -> Result<String> {
    let n = trace.samples.len();
    let expected = (SNIPPET_SECONDS * trace.sample_rate_hz).round() as usize;
    if n != expected {
        return Err(Error::Domain(format!(
            "snippet wants an 8 s chunk ({expected} samples at {} Hz), got {n}",
            trace.sample_rate_hz
        )));
    }

    let grid_w = (SNIPPET_SECONDS * MM_PER_SECOND) as usize; // 200 mm
    let grid_h = (2.0 * AMPLITUDE_MV * MM_PER_MV) as usize; // 40 mm
    let width = 2.0 * MARGIN_MM + grid_w as f64;
    let height = 2.0 * MARGIN_MM + HEADER_MM + grid_h as f64;
    let x0 = MARGIN_MM;
    let top = MARGIN_MM + HEADER_MM;
    let y_mid = top + grid_h as f64 / 2.0; // 0 mV line

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}mm\" height=\"{height}mm\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"#fff7f2\"/>\n"
    ));

    // vertical grid: one line per millimeter, major every second (25 mm)
    for k in 0..=grid_w {
        let x = x0 + k as f64;
        let class = if k % (MM_PER_SECOND as usize) == 0 {
            "grid-v-major"
        } else {
            "grid-v-minor"
        };
        let (stroke, sw) = if class == "grid-v-major" {
            ("#e08070", 0.25)
        } else {
            ("#f2c4b8", 0.1)
        };
        svg.push_str(&format!(
            "<line class=\"{class}\" x1=\"{x}\" y1=\"{top}\" x2=\"{x}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{sw}\"/>\n",
            top + grid_h as f64
        ));
    }
    // horizontal grid: one line per millimeter, major every millivolt (10 mm)
    for k in 0..=grid_h {
        let y = top + k as f64;
        let class = if k % (MM_PER_MV as usize) == 0 {
            "grid-h-major"
        } else {
            "grid-h-minor"
        };
        let (stroke, sw) = if class == "grid-h-major" {
            ("#e08070", 0.25)
        } else {
            ("#f2c4b8", 0.1)
        };
        svg.push_str(&format!(
            "<line class=\"{class}\" x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{stroke}\" stroke-width=\"{sw}\"/>\n",
            x0 + grid_w as f64
        ));
    }

    // heart rate annotation
    let hr_text = match estimate_heart_rate(trace) {
        Ok(bpm) => format!("HR: {bpm:.0} bpm"),
        Err(_) => "HR: n/a".into(),
    };
    let rate_text = format!(
        "{} | {} mm/s | {} mm/mV",
        trace.lead, MM_PER_SECOND, MM_PER_MV
    );
    svg.push_str(&format!(
        "<text class=\"hr\" x=\"{x0}\" y=\"{}\" font-size=\"4\" font-family=\"monospace\">{hr_text}</text>\n",
        MARGIN_MM + 4.0
    ));
    svg.push_str(&format!(
        "<text class=\"scales\" x=\"{}\" y=\"{}\" font-size=\"3\" font-family=\"monospace\" text-anchor=\"end\">{rate_text}</text>\n",
        x0 + grid_w as f64,
        MARGIN_MM + 4.0
    ));

    // the trace polyline, one point per sample
    let mut points = String::new();
    for (i, &mv) in trace.samples.iter().enumerate() {
        let t = i as f64 / trace.sample_rate_hz;
        let x = x0 + t * MM_PER_SECOND;
        let clamped = mv.clamp(-AMPLITUDE_MV, AMPLITUDE_MV);
        let y = y_mid - clamped * MM_PER_MV;
        if i > 0 {
            points.push(' ');
        }
        points.push_str(&format!("{x:.3},{y:.3}"));
    }
    svg.push_str(&format!(
        "<polyline class=\"trace\" fill=\"none\" stroke=\"#222222\" stroke-width=\"0.3\" points=\"{points}\"/>\n"
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(samples: Vec<f64>, rate: f64) -> EcgTrace {
        EcgTrace::new(samples, rate).unwrap()
    }

    fn count(haystack: &str, needle: &str) -> usize {
        haystack.matches(needle).count()
    }

    #[test]
    fn polyline_has_one_point_per_sample() {
        let trace = chunk(vec![0.1; 2000], 250.0);
        let svg = render_snippet(&trace).unwrap();
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(points.split(' ').count(), 2000);
    }

    #[test]
    fn vertical_grid_has_201_lines_with_9_majors() {
        let trace = chunk(vec![0.0; 2000], 250.0);
        let svg = render_snippet(&trace).unwrap();
        // 8 s * 25 mm/s + 1 vertical lines, majors at 1 s spacing
        assert_eq!(
            count(&svg, "grid-v-major") + count(&svg, "grid-v-minor"),
            201
        );
        assert_eq!(count(&svg, "grid-v-major"), 9);
    }

    #[test]
    fn flat_signal_draws_on_the_zero_line() {
        let trace = chunk(vec![0.0; 2000], 250.0);
        let svg = render_snippet(&trace).unwrap();
        let points = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        let ys: Vec<&str> = points
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap())
            .collect();
        assert!(ys.iter().all(|&y| y == ys[0]));
        // the zero line sits mid-strip: margin + header + 20 mm
        assert_eq!(ys[0], "38.000");
        assert!(svg.contains("HR: n/a"));
    }

    #[test]
    fn wrong_duration_is_a_domain_error() {
        let trace = chunk(vec![0.0; 1000], 250.0);
        assert!(matches!(
            render_snippet(&trace),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn heart_rate_annotation_appears() {
        let mut samples = vec![0.0; 2000];
        let mut i = 5;
        while i < 2000 {
            samples[i] = 1.0;
            i += 125; // 2 Hz at 250 Hz sampling
        }
        let trace = chunk(samples, 250.0);
        let svg = render_snippet(&trace).unwrap();
        assert!(svg.contains("HR: 120 bpm"), "svg header: {}", &svg[..400]);
    }
}
