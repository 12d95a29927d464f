//! Named parameter layout shared by initialization, binding, and checkpoints.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

use super::{Init, ModelConfig};

/// Projections of one attention layer: `w_q`, `w_k`, `w_v` are
/// `d_model × d_model` (heads split by columns), `w_o` the output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

pub type AttnVars = AttnIds<Var>;

impl<T: Copy> AttnIds<T> {
    pub fn ids(&self) -> [T; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }

    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> AttnIds<U> {
        AttnIds {
            w_q: f(self.w_q),
            w_k: f(self.w_k),
            w_v: f(self.w_v),
            w_o: f(self.w_o),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LnIds<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T: Copy> LnIds<T> {
    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> LnIds<U> {
        LnIds {
            gamma: f(self.gamma),
            beta: f(self.beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnIds<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T: Copy> FfnIds<T> {
    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> FfnIds<U> {
        FfnIds {
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncLayer<T> {
    pub ln1: LnIds<T>,
    pub attn: AttnIds<T>,
    pub ln2: LnIds<T>,
    pub ffn: FfnIds<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecLayer<T> {
    pub ln1: LnIds<T>,
    pub self_attn: AttnIds<T>,
    pub ln2: LnIds<T>,
    pub cross_attn: AttnIds<T>,
    pub ln3: LnIds<T>,
    pub ffn: FfnIds<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout<T> {
    /// Token table shared by encoder, decoder, and the output projection.
    pub embed: T,
    pub enc_layers: Vec<EncLayer<T>>,
    pub enc_ln: LnIds<T>,
    pub dec_layers: Vec<DecLayer<T>>,
    pub dec_ln: LnIds<T>,
    pub out_b: T,
}

pub type ParamLayout = Layout<ParamId>;
pub type BoundLayout = Layout<Var>;

impl<T: Copy> Layout<T> {
    fn map<U>(&self, f: &mut impl FnMut(T) -> U) -> Layout<U> {
        Layout {
            embed: f(self.embed),
            enc_layers: self
                .enc_layers
                .iter()
                .map(|l| EncLayer {
                    ln1: l.ln1.map(f),
                    attn: l.attn.map(f),
                    ln2: l.ln2.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            enc_ln: self.enc_ln.map(f),
            dec_layers: self
                .dec_layers
                .iter()
                .map(|l| DecLayer {
                    ln1: l.ln1.map(f),
                    self_attn: l.self_attn.map(f),
                    ln2: l.ln2.map(f),
                    cross_attn: l.cross_attn.map(f),
                    ln3: l.ln3.map(f),
                    ffn: l.ffn.map(f),
                })
                .collect(),
            dec_ln: self.dec_ln.map(f),
            out_b: f(self.out_b),
        }
    }
}

impl ParamLayout {
    /// Registers every parameter in a fixed order; `make` produces the
    /// initial tensor for a shape.
    pub(super) fn build(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        make: &mut dyn FnMut(&[usize], Init) -> Tensor,
    ) -> Self {
        let d = cfg.d_model;
        let mut add = |name: String, shape: &[usize], init: Init| store.push(name, make(shape, init));
        let embed = add("embed".into(), &[cfg.vocab_size, d], Init::Embedding);
        let ln = |add: &mut dyn FnMut(String, &[usize], Init) -> ParamId, p: &str| LnIds {
            gamma: add(format!("{p}.gamma"), &[d], Init::Ones),
            beta: add(format!("{p}.beta"), &[d], Init::Zeros),
        };
        let attn = |add: &mut dyn FnMut(String, &[usize], Init) -> ParamId, p: &str| AttnIds {
            w_q: add(format!("{p}.w_q"), &[d, d], Init::Linear { fan_in: d }),
            w_k: add(format!("{p}.w_k"), &[d, d], Init::Linear { fan_in: d }),
            w_v: add(format!("{p}.w_v"), &[d, d], Init::Linear { fan_in: d }),
            w_o: add(format!("{p}.w_o"), &[d, d], Init::Linear { fan_in: d }),
        };
        let ffn = |add: &mut dyn FnMut(String, &[usize], Init) -> ParamId, p: &str| FfnIds {
            w1: add(format!("{p}.w1"), &[d, cfg.d_ff], Init::Linear { fan_in: d }),
            b1: add(format!("{p}.b1"), &[cfg.d_ff], Init::Zeros),
            w2: add(format!("{p}.w2"), &[cfg.d_ff, d], Init::Linear { fan_in: cfg.d_ff }),
            b2: add(format!("{p}.b2"), &[d], Init::Zeros),
        };
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|i| EncLayer {
                ln1: ln(&mut add, &format!("enc.{i}.ln1")),
                attn: attn(&mut add, &format!("enc.{i}.self_attn")),
                ln2: ln(&mut add, &format!("enc.{i}.ln2")),
                ffn: ffn(&mut add, &format!("enc.{i}.ffn")),
            })
            .collect();
        let enc_ln = ln(&mut add, "enc.ln");
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|i| DecLayer {
                ln1: ln(&mut add, &format!("dec.{i}.ln1")),
                self_attn: attn(&mut add, &format!("dec.{i}.self_attn")),
                ln2: ln(&mut add, &format!("dec.{i}.ln2")),
                cross_attn: attn(&mut add, &format!("dec.{i}.cross_attn")),
                ln3: ln(&mut add, &format!("dec.{i}.ln3")),
                ffn: ffn(&mut add, &format!("dec.{i}.ffn")),
            })
            .collect();
        let dec_ln = ln(&mut add, "dec.ln");
        let out_b = add("out.b".into(), &[cfg.vocab_size], Init::Zeros);
        Layout {
            embed,
            enc_layers,
            enc_ln,
            dec_layers,
            dec_ln,
            out_b,
        }
    }

    pub(super) fn bind(&self, g: &mut Graph) -> BoundLayout {
        self.map(&mut |id| g.param(id))
    }
}
