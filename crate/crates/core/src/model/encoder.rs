//! Position-aware CNN sentence encoder.
//!
//! Each token is represented by its word vector concatenated with two
//! position embeddings (offset to the head and to the tail entity). A
//! width-`window` convolution with zero padding, a ReLU, and a max over the
//! true sentence length produce one `hidden`-dimensional vector per sample.

use super::{EncoderConfig, ModelError, ParamVars};
use crate::data::IndexedSample;
use crate::numerics::{Tape, Var};

/// Encodes a batch of samples into a `[batch, hidden]` matrix.
///
/// Sequences are processed up to the longest true length in the batch;
/// padding never influences the output.
pub fn encode_batch(
    tape: &mut Tape,
    params: &ParamVars,
    samples: &[&IndexedSample],
    cfg: &EncoderConfig,
) -> Result<Var, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Contract {
            op: "encode",
            detail: "empty batch".into(),
        });
    }
    let lengths: Vec<usize> = samples.iter().map(|s| s.length.min(s.token_ids.len())).collect();
    if lengths.contains(&0) {
        return Err(ModelError::Contract {
            op: "encode",
            detail: "sample has no tokens".into(),
        });
    }
    let seq = *lengths.iter().max().expect("nonempty");
    let clip = cfg.pos_clip as i32;
    let mut ids = Vec::with_capacity(samples.len() * seq);
    let mut head = Vec::with_capacity(samples.len() * seq);
    let mut tail = Vec::with_capacity(samples.len() * seq);
    for s in samples {
        for t in 0..seq {
            let (id, h, tl) = if t < s.token_ids.len() {
                (s.token_ids[t], s.head_rel_pos[t], s.tail_rel_pos[t])
            } else {
                (crate::data::PAD_ID, 0, 0)
            };
            if h.abs() > clip || tl.abs() > clip {
                return Err(ModelError::Contract {
                    op: "encode",
                    detail: format!("relative position outside ±{clip}; sample indexed with a different pos_clip"),
                });
            }
            ids.push(id);
            head.push((h + clip) as usize);
            tail.push((tl + clip) as usize);
        }
    }
    let words = tape.gather_rows(params.word_emb, &ids)?;
    let head = tape.gather_rows(params.pos_emb_head, &head)?;
    let tail = tape.gather_rows(params.pos_emb_tail, &tail)?;
    let x = tape.concat(&[words, head, tail], 1)?;
    let windows = tape.unfold(x, seq, cfg.window, &lengths)?;
    let filters_t = tape.transpose(params.conv_filters)?;
    let conv = tape.matmul(windows, filters_t)?;
    let conv = tape.add(conv, params.conv_bias)?;
    let act = tape.relu(conv)?;
    Ok(tape.masked_max_pool(act, seq, &lengths)?)
}

/// Encodes one sample into a `[hidden]` vector.
pub fn encode(
    tape: &mut Tape,
    params: &ParamVars,
    sample: &IndexedSample,
    cfg: &EncoderConfig,
) -> Result<Var, ModelError> {
    let batch = encode_batch(tape, params, &[sample], cfg)?;
    let h = tape.value(batch).shape()[1];
    Ok(tape.reshape(batch, &[h])?)
}
