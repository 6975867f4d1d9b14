// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cached barrier gradient versus the literal mean over heads and image keys.

use barrier_steer::barrier::{barrier_direct, barrier_value};
use barrier_steer::harness::random_prompts;
use barrier_steer::model::{init_model, prefill, ModelConfig};
use barrier_steer::numeric::{seeded_gaussian, Rng};

fn main() -> barrier_steer::Result<()> {
    let config = ModelConfig::default();
    let weights = init_model(&config)?;
    let prompt = random_prompts(&config, 1, 5, 11).remove(0);
    let layers = [1, 3, 5];
    let pre = prefill(&weights, &prompt.tokens, &prompt.images, &layers)?;
    let mut rng = Rng::new(3);
    for &layer in &layers {
        let g = &pre.context.layer(layer).expect("steered layer").gradient;
        let x = seeded_gaussian(&mut rng, config.d_model);
        let cached = barrier_value(g, &x)?;
        let literal = barrier_direct(&x, &weights.layers[layer], &pre.cache, layer, &pre.context.image_positions)?;
        println!(
            "layer {layer}: |g| {:.4} cached {cached:+.6} literal {literal:+.6} diff {:.1e}",
            g.norm_sq.sqrt(),
            (cached - literal).abs()
        );
    }
    Ok(())
}
