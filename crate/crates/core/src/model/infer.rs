//! Sliding-window inference with output compositing.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::flowcomp::{downsample_quarter, endpoint_error, estimate_bidirectional, BidirectionalFlows};
use crate::tensor::{Graph, Tensor};

use super::generator::Generator;
use super::train::gather;

/// One local window and the non-local references chosen for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub local: Range<usize>,
    /// Every multiple of the sampling rate outside the local window.
    pub candidates: Vec<usize>,
    /// Up to `t_nonlocal` candidates nearest to the window (ties to the
    /// earlier frame), in temporal order.
    pub nonlocal: Vec<usize>,
}

/// Distance from frame `i` to the window `r`.
fn distance(i: usize, r: &Range<usize>) -> usize {
    if i < r.start {
        r.start - i
    } else {
        i + 1 - r.end
    }
}

pub fn window_schedule(frames: usize, window: usize, rate: usize, t_nonlocal: usize) -> Vec<WindowPlan> {
    let window = window.max(1);
    let rate = rate.max(1);
    (0..frames)
        .step_by(window)
        .map(|start| {
            let local = start..(start + window).min(frames);
            let candidates: Vec<usize> = (0..frames)
                .step_by(rate)
                .filter(|i| !local.contains(i))
                .collect();
            let mut nonlocal = candidates.clone();
            nonlocal.sort_by_key(|&i| (distance(i, &local), i));
            nonlocal.truncate(t_nonlocal);
            nonlocal.sort_unstable();
            WindowPlan {
                local,
                candidates,
                nonlocal,
            }
        })
        .collect()
}

/// `out * mask + input * (1 - mask)` for binary masks: masked pixels come
/// from `output`, all others are copied from `input` unchanged.
pub fn composite(output: &Tensor, input: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if output.shape() != s || masks.shape().len() != 4 || masks.shape()[..3] != s[..3] || masks.shape()[3] != 1 {
        return Err(Error::shape("composite", s, masks.shape()));
    }
    let c = s[3];
    let mut out = input.clone();
    for (px, &m) in masks.data().iter().enumerate() {
        if m > 0.5 {
            let range = px * c..(px + 1) * c;
            out.data_mut()[range.clone()].copy_from_slice(&output.data()[range]);
        }
    }
    Ok(out)
}

/// Inpaint a whole video window by window; every frame is produced by the
/// window that contains it as a local frame.
pub fn sliding_window_inference(gen: &Generator, video: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 4 || masks.shape().len() != 4 || masks.shape()[..3] != s[..3] {
        return Err(Error::shape("sliding_window_inference", s, masks.shape()));
    }
    let cfg = &gen.cfg;
    let mut result = video.clone();
    let frame_len = s[1] * s[2] * s[3];
    for plan in window_schedule(s[0], cfg.sliding_window, cfg.sample_rate, cfg.t_nonlocal) {
        let order: Vec<usize> = plan.local.clone().chain(plan.nonlocal.iter().copied()).collect();
        let clip = gather(video, &order)?;
        let clip_masks = gather(masks, &order)?;
        let out = gen.infer(&clip, &clip_masks, plan.local.len())?;
        let t_l = plan.local.len();
        let local = composite(&out.narrow0(0, t_l), &clip.narrow0(0, t_l), &clip_masks.narrow0(0, t_l))?;
        let dst = plan.local.start * frame_len..plan.local.end * frame_len;
        result.data_mut()[dst].copy_from_slice(local.data());
    }
    Ok(result)
}

/// Mean endpoint error of the flow network on masked local windows of
/// `video`, against quarter-resolution ground truth, over both directions
/// and every adjacent pair covered by the sliding-window schedule.
pub fn flow_endpoint_error(gen: &Generator, video: &Tensor, masks: &Tensor, gt: &BidirectionalFlows) -> Result<f64> {
    let t = video.shape()[0];
    if gt.pairs() + 1 != t {
        return Err(Error::InvalidArgument(format!("{} flow pairs for {t} frames", gt.pairs())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for plan in window_schedule(t, gen.cfg.sliding_window, gen.cfg.sample_rate, 0) {
        let len = plan.local.len();
        if len < 2 {
            continue;
        }
        let graph = Graph::new();
        let p = gen.bind(&graph, false);
        let frames = graph.constant(video.narrow0(plan.local.start, len));
        let keep = graph.constant(masks.narrow0(plan.local.start, len).map(|m| 1.0 - m));
        let small = downsample_quarter(frames.mul(keep)?)?;
        let Some(pred) = estimate_bidirectional(&p, &gen.flow_net, small)? else {
            continue;
        };
        let want = gt.window(plan.local.start, len);
        let pred = pred.values();
        total += endpoint_error(&pred.forward, &want.forward)? * (len - 1) as f64;
        total += endpoint_error(&pred.backward, &want.backward)? * (len - 1) as f64;
        count += 2 * (len - 1);
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_frames_window_ten() {
        let plans = window_schedule(50, 10, 10, 3);
        assert_eq!(plans.len(), 5);
        assert_eq!(plans[1].local, 10..20);
        assert_eq!(plans[1].candidates, vec![0, 20, 30, 40]);
        assert_eq!(plans[1].nonlocal, vec![0, 20, 30]);
        assert_eq!(plans[0].nonlocal, vec![10, 20, 30]);
    }

    #[test]
    fn single_frame_has_no_references() {
        let plans = window_schedule(1, 10, 10, 3);
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].local, 0..1);
        assert!(plans[0].nonlocal.is_empty());
    }

    #[test]
    fn compositing_keeps_unmasked_pixels() {
        let input = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64 * 0.1);
        let output = Tensor::full(&[1, 2, 2, 3], 9.0);
        let masks = Tensor::new(&[1, 2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let c = composite(&output, &input, &masks).unwrap();
        assert_eq!(&c.data()[0..3], &input.data()[0..3]);
        assert_eq!(&c.data()[3..6], &[9.0, 9.0, 9.0]);
    }
}
