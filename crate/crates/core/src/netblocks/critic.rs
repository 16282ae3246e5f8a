//! Strided convolutional encoder-decoder scoring each voxel of a mask as
//! real (1) or predicted (0).

use sat3d_tensor::{resize_trilinear, Var};

use super::{Builder, Conv, Cx, ModelConfig};

#[derive(Clone, Debug)]
pub struct Critic {
    down: Vec<Conv>,
    up: Vec<Conv>,
    head: Conv,
    slope: f32,
}

impl Critic {
    pub(crate) fn build(b: &mut Builder, model: &ModelConfig) -> Self {
        let ch = &model.critic.channels;
        let mut cin = 1;
        let down = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = b.conv(&format!("critic.down.{i}"), cin, c, 3);
                cin = c;
                conv
            })
            .collect();
        let up = (1..ch.len()).rev().enumerate().map(|(i, l)| b.conv(&format!("critic.up.{i}"), ch[l], ch[l - 1], 3)).collect();
        let head = b.conv("critic.head", ch[0], 1, 1);
        Self { down, up, head, slope: model.critic.slope }
    }

    /// Confidence logits `[1, S, S, S]` for a probability grid `[1, S, S, S]`.
    pub fn forward<'g>(&self, cx: Cx<'g>, x: &Var<'g>) -> Var<'g> {
        let full = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let mut h = x.clone();
        for c in &self.down {
            h = c.fwd(cx, &h, 2, 1).leaky_relu(self.slope);
        }
        for c in &self.up {
            let s = h.shape();
            h = resize_trilinear(&h, [s[1] * 2, s[2] * 2, s[3] * 2]);
            h = c.fwd(cx, &h, 1, 1).leaky_relu(self.slope);
        }
        resize_trilinear(&self.head.fwd(cx, &h, 1, 0), full)
    }
}
