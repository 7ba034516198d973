use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HighlightFormat {
    Ansi,
    Html,
}

impl FromStr for HighlightFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Self::Ansi),
            "html" => Ok(Self::Html),
            other => Err(Error::InvalidArgument(format!("unknown highlight format {other:?}"))),
        }
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Shades each token by `p_n / max(p)`. ANSI output uses a 24-bit
/// background from white to orange; HTML output uses spans with an alpha
/// background and the weight in a data attribute.
pub fn render_highlight(tokens: &[String], p: &[f64], format: HighlightFormat) -> Result<String> {
    if tokens.len() != p.len() {
        return Err(Error::LengthMismatch { expected: tokens.len(), found: p.len() });
    }
    let max = p.iter().copied().fold(0.0, f64::max);
    let intensity = |v: f64| if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let mut out = String::new();
    match format {
        HighlightFormat::Ansi => {
            for (i, (tok, &w)) in tokens.iter().zip(p).enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let level = (intensity(w) * 255.0).round() as u8;
                if level == 0 {
                    out.push_str(tok);
                } else {
                    let fade = 255 - (level as u16 * 165 / 255) as u8;
                    let blue = 255 - level;
                    write!(out, "\x1b[48;2;255;{fade};{blue}m{tok}\x1b[0m").unwrap();
                }
            }
            out.push('\n');
        }
        HighlightFormat::Html => {
            out.push_str("<p class=\"gist\">");
            for (i, (tok, &w)) in tokens.iter().zip(p).enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(
                    out,
                    "<span style=\"background-color: rgba(255, 165, 0, {:.3})\" data-weight=\"{:.6}\">{}</span>",
                    intensity(w),
                    w,
                    escape_html(tok)
                )
                .unwrap();
            }
            out.push_str("</p>\n");
        }
    }
    Ok(out)
}
