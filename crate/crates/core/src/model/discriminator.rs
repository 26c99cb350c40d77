//! Spatio-temporal patch discriminator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv3d, ParamGroup, ParamStore};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    convs: Vec<Conv3d>,
}

impl Discriminator {
    /// Four hidden widths from `widths` followed by a one-channel score
    /// layer; every layer uses kernel (3, 5, 5), stride (1, 2, 2).
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in widths.iter().chain(std::iter::once(&1)).enumerate() {
            convs.push(Conv3d::new(
                &mut store,
                &format!("disc{i}"),
                ParamGroup::Discriminator,
                c_in,
                c_out,
                [3, 5, 5],
                [1, 2, 2],
                [1, 2, 2],
                rng,
            ));
            c_in = c_out;
        }
        Discriminator { store, convs }
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        self.store.bind(graph, |_| trainable)
    }

    /// Score map `[T', h', w', 1]` for a clip `[T, H, W, 3]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, video: Var<'g>) -> Result<Var<'g>> {
        let shape = video.shape();
        let [t, h, w, 3] = shape[..] else {
            return Err(Error::invalid_shape("discriminator", format!("expected [T, H, W, 3], got {shape:?}")));
        };
        let mut x = video.reshape(&[1, t, h, w, 3])?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(p, x)?;
            if i + 1 < self.convs.len() {
                x = x.lrelu()?;
            }
        }
        let s = x.shape();
        x.reshape(&s[1..])
    }
}
