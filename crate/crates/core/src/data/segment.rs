use crate::error::{Error, Result};

/// Frame window `[start, end]` (1-based, inclusive) of the `index`-th segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based row range of the window.
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start - 1..self.end
    }
}

/// Splits `n` frames into windows of length `l` every `p` frames.
///
/// There are `floor(n/p) + 1` candidate windows, the `i`-th starting at
/// frame `(i-1)p + 1`. Candidates starting past `n` are dropped and the
/// last window is cut at `n`.
pub fn segment_video(n: usize, l: usize, p: usize) -> Result<Vec<SegmentSpan>> {
    if n == 0 || l == 0 || p == 0 {
        return Err(Error::config(format!(
            "segmentation needs n, l, p >= 1 (got n={n}, l={l}, p={p})"
        )));
    }
    if p > l {
        return Err(Error::config(format!(
            "stride {p} exceeds segment length {l}; frames would be skipped"
        )));
    }
    let candidates = n / p + 1;
    Ok((1..=candidates)
        .map(|i| ((i - 1) * p + 1, i))
        .take_while(|&(start, _)| start <= n)
        .map(|(start, index)| SegmentSpan {
            index,
            start,
            end: (start + l - 1).min(n),
        })
        .collect())
}
