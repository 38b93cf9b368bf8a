//! Whole-network forward and backward passes.

use crate::error::{Error, Result};
use crate::model::graph::ModelGraph;
use crate::model::params::ParamStore;
use crate::model::unit::{unit_backward, unit_forward_infer, unit_forward_train, UnitTape};
use crate::ops::{
    add, concat_backward, concat_channels, conv2d_backward, conv2d_forward, sigmoid_backward,
    sigmoid_forward, upsample2x_backward, upsample2x_forward,
};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Output shape of each main-path convolution, recorded in layer order by
/// a traced forward.
pub type ShapeTrace = Vec<(String, [usize; 4])>;

/// Forward execution mode. Training retains activations for a subsequent
/// backward pass and updates BN running statistics; inference does neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn check_input<S: Scalar>(graph: &ModelGraph, x: &Tensor<S>) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != graph.input_channels {
        return Err(Error::InvalidArgument {
            op: "forward",
            what: format!("expected {} input channels, got {c}", graph.input_channels),
        });
    }
    if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::BadInputSize {
            shape: format_shape(&x.shape()),
        });
    }
    Ok(())
}

/// Pure inference forward pass; safe to call from multiple threads on a
/// shared store.
pub fn forward_infer<S: Scalar>(
    graph: &ModelGraph,
    x: &Tensor<S>,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    Ok(forward_infer_inner(graph, x, store, None)?.0)
}

/// Inference forward pass that also reports the output shape of every
/// main-path convolution, in layer order `conv1..conv15`.
pub fn forward_infer_traced<S: Scalar>(
    graph: &ModelGraph,
    x: &Tensor<S>,
    store: &ParamStore<S>,
) -> Result<(Tensor<S>, ShapeTrace)> {
    let (y, trace) = forward_infer_inner(graph, x, store, Some(Vec::new()))?;
    Ok((y, trace.unwrap_or_default()))
}

fn forward_infer_inner<S: Scalar>(
    graph: &ModelGraph,
    x: &Tensor<S>,
    store: &ParamStore<S>,
    mut trace: Option<ShapeTrace>,
) -> Result<(Tensor<S>, Option<ShapeTrace>)> {
    check_input(graph, x)?;
    let units = graph.units();

    let l1 = unit_forward_infer(x, &units[0], store, trace.as_mut())?;
    let l2 = unit_forward_infer(&l1, &units[1], store, trace.as_mut())?;
    let l3 = unit_forward_infer(&l2, &units[2], store, trace.as_mut())?;
    let l4 = unit_forward_infer(&l3, &units[3], store, trace.as_mut())?;

    let d5 = concat_channels(&upsample2x_forward(&l4), &l3)?;
    let l5 = unit_forward_infer(&d5, &units[4], store, trace.as_mut())?;
    let d6 = concat_channels(&upsample2x_forward(&l5), &l2)?;
    let l6 = unit_forward_infer(&d6, &units[5], store, trace.as_mut())?;
    let d7 = concat_channels(&upsample2x_forward(&l6), &l1)?;
    let l7 = unit_forward_infer(&d7, &units[6], store, trace.as_mut())?;

    let logits = conv2d_forward(&l7, store.get(graph.head_kernel_name())?, 1, 0)?;
    if let Some(trace) = trace.as_mut() {
        trace.push(("conv15".to_string(), logits.shape()));
    }
    Ok((sigmoid_forward(&logits), trace))
}

/// Activations retained by a training-mode forward.
pub struct Tape<S: Scalar> {
    units: Vec<UnitTape<S>>,
    /// Input to the 1x1 head conv (the level-7 output).
    head_in: Tensor<S>,
    /// The sigmoid output; its own backward is expressed in terms of it.
    probs: Tensor<S>,
}

/// The network: a graph plus the tape of the most recent training forward.
pub struct ResUnet<S: Scalar = f32> {
    pub graph: ModelGraph,
    tape: Option<Tape<S>>,
}

impl<S: Scalar> ResUnet<S> {
    pub fn new(graph: ModelGraph) -> Self {
        ResUnet { graph, tape: None }
    }

    /// Runs the network. `Mode::Train` updates BN running statistics in the
    /// store and retains activations; `Mode::Infer` leaves the store
    /// untouched and clears any retained tape.
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        store: &mut ParamStore<S>,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        match mode {
            Mode::Infer => {
                self.tape = None;
                forward_infer(&self.graph, x, store)
            }
            Mode::Train => {
                check_input(&self.graph, x)?;
                let units = self.graph.units();
                let mut tapes = Vec::with_capacity(7);

                let (l1, t) = unit_forward_train(x, &units[0], store)?;
                tapes.push(t);
                let (l2, t) = unit_forward_train(&l1, &units[1], store)?;
                tapes.push(t);
                let (l3, t) = unit_forward_train(&l2, &units[2], store)?;
                tapes.push(t);
                let (l4, t) = unit_forward_train(&l3, &units[3], store)?;
                tapes.push(t);

                let d5 = concat_channels(&upsample2x_forward(&l4), &l3)?;
                let (l5, t) = unit_forward_train(&d5, &units[4], store)?;
                tapes.push(t);
                let d6 = concat_channels(&upsample2x_forward(&l5), &l2)?;
                let (l6, t) = unit_forward_train(&d6, &units[5], store)?;
                tapes.push(t);
                let d7 = concat_channels(&upsample2x_forward(&l6), &l1)?;
                let (l7, t) = unit_forward_train(&d7, &units[6], store)?;
                tapes.push(t);

                let logits = conv2d_forward(&l7, store.get(self.graph.head_kernel_name())?, 1, 0)?;
                let probs = sigmoid_forward(&logits);
                self.tape = Some(Tape {
                    units: tapes,
                    head_in: l7,
                    probs: probs.clone(),
                });
                Ok(probs)
            }
        }
    }

    /// Backward pass through the retained forward. Consumes the tape and
    /// returns one gradient tensor per learnable parameter, aligned with
    /// the store's iteration order.
    pub fn backward(
        &mut self,
        loss_grad: &Tensor<S>,
        store: &ParamStore<S>,
    ) -> Result<ParamStore<S>> {
        let tape = self.tape.take().ok_or(Error::NoRetainedForward)?;
        if loss_grad.shape() != tape.probs.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: format_shape(&tape.probs.shape()),
                right: format_shape(&loss_grad.shape()),
            });
        }
        let units = self.graph.units();
        let widths = self.graph.widths;
        let mut grads = store.zeroed_learnable();

        // Head: sigmoid then the 1x1 conv.
        let g_logits = sigmoid_backward(&tape.probs, loss_grad)?;
        let head_name = self.graph.head_kernel_name();
        let (g_l7, g_k15) = conv2d_backward(&tape.head_in, store.get(head_name)?, 1, 0, &g_logits)?;
        {
            let entry = grads.get_mut(head_name)?;
            let src = g_k15.as_slice();
            for (g, d) in entry.as_mut_slice().iter_mut().zip(src) {
                *g += *d;
            }
        }

        // Decoder. Each concat splits into the upsampled lower level and the
        // encoder skip; skip gradients are added back in on the way down.
        let g_d7 = unit_backward(&g_l7, &units[6], store, &tape.units[6], &mut grads)?;
        let (g_up6, g_skip_l1) = concat_backward(&g_d7, widths[5])?;
        let g_l6 = upsample2x_backward(&g_up6)?;

        let g_d6 = unit_backward(&g_l6, &units[5], store, &tape.units[5], &mut grads)?;
        let (g_up5, g_skip_l2) = concat_backward(&g_d6, widths[4])?;
        let g_l5 = upsample2x_backward(&g_up5)?;

        let g_d5 = unit_backward(&g_l5, &units[4], store, &tape.units[4], &mut grads)?;
        let (g_up4, g_skip_l3) = concat_backward(&g_d5, widths[3])?;
        let g_l4 = upsample2x_backward(&g_up4)?;

        // Encoder; inputs of levels 2-4 are the skip sources.
        let g_l3 = add(
            &unit_backward(&g_l4, &units[3], store, &tape.units[3], &mut grads)?,
            &g_skip_l3,
        )?;
        let g_l2 = add(
            &unit_backward(&g_l3, &units[2], store, &tape.units[2], &mut grads)?,
            &g_skip_l2,
        )?;
        let g_l1 = add(
            &unit_backward(&g_l2, &units[1], store, &tape.units[1], &mut grads)?,
            &g_skip_l1,
        )?;
        unit_backward(&g_l1, &units[0], store, &tape.units[0], &mut grads)?;

        Ok(grads)
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_input_produces_probabilities() {
        let graph = ModelGraph::new(0.0625);
        let mut store: ParamStore<f32> = graph.init_params(11);
        let x = Tensor::<f32>::from_fn([2, 3, 32, 32], |n, c, h, w| {
            ((n + c + h + w) % 7) as f32 * 0.1
        });
        let mut net = ResUnet::new(graph);
        let y = net.forward(&x, &mut store, Mode::Infer).unwrap();
        assert_eq!(y.shape(), [2, 1, 32, 32]);
        assert!(y.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let graph = ModelGraph::new(0.0625);
        let mut store: ParamStore<f32> = graph.init_params(11);
        let mut net = ResUnet::new(graph);
        let x = Tensor::<f32>::zeros([1, 3, 20, 24]);
        assert!(matches!(
            net.forward(&x, &mut store, Mode::Infer),
            Err(Error::BadInputSize { .. })
        ));
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(matches!(
            net.forward(&x, &mut store, Mode::Infer),
            Err(Error::BadInputSize { .. })
        ));
    }

    #[test]
    fn backward_without_training_forward_rejected() {
        let graph = ModelGraph::new(0.0625);
        let mut store: ParamStore<f32> = graph.init_params(1);
        let mut net = ResUnet::new(graph);
        let x = Tensor::<f32>::filled([1, 3, 16, 16], 0.3);
        let g = Tensor::<f32>::zeros([1, 1, 16, 16]);
        assert!(matches!(
            net.backward(&g, &store),
            Err(Error::NoRetainedForward)
        ));
        // An inference forward must not arm the tape either.
        net.forward(&x, &mut store, Mode::Infer).unwrap();
        assert!(matches!(
            net.backward(&g, &store),
            Err(Error::NoRetainedForward)
        ));
    }

    #[test]
    fn zero_loss_grad_gives_zero_param_grads() {
        let graph = ModelGraph::new(0.0625);
        let mut store: ParamStore<f32> = graph.init_params(2);
        let mut net = ResUnet::new(graph.clone());
        let x = Tensor::<f32>::from_fn([1, 3, 16, 16], |_, c, h, w| {
            0.01 * ((c * 256 + h * 16 + w) as f32)
        });
        net.forward(&x, &mut store, Mode::Train).unwrap();
        let g = Tensor::<f32>::zeros([1, 1, 16, 16]);
        let grads = net.backward(&g, &store).unwrap();
        for (name, t) in grads.iter() {
            assert!(t.as_slice().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn head_kernel_gradient_matches_linear_identity() {
        // The head is a bias-free 1x1 conv: its kernel gradient is the sum
        // over pixels of (pre-sigmoid grad x pre-head activation).
        let graph = ModelGraph::new(0.0625);
        let mut store: ParamStore<f32> = graph.init_params(3);
        let mut net = ResUnet::new(graph.clone());
        let x = Tensor::<f32>::from_fn([1, 3, 16, 16], |_, c, h, w| {
            (((c * 7 + h * 3 + w) % 11) as f32) * 0.08 - 0.3
        });
        let probs = net.forward(&x, &mut store, Mode::Train).unwrap();

        // Recover the pre-head activation by an inference-free replay: run
        // forward again in train mode and pull the tape's head input.
        let mut net2 = ResUnet::new(graph.clone());
        let mut store2 = store.clone();
        let probs2 = net2.forward(&x, &mut store2, Mode::Train).unwrap();
        assert!(probs2.bit_eq(&probs));
        let head_in = net2.tape.as_ref().unwrap().head_in.clone();

        let loss_grad = Tensor::<f32>::filled([1, 1, 16, 16], 0.5);
        let grads = net.backward(&loss_grad, &store).unwrap();
        let gk = grads.get("conv15.kernel").unwrap();

        let g_logits = sigmoid_backward(&probs, &loss_grad).unwrap();
        let c_in = head_in.channels();
        for ci in 0..c_in {
            let mut expected = 0.0f64;
            for h in 0..16 {
                for w in 0..16 {
                    expected += g_logits.at(0, 0, h, w) as f64 * head_in.at(0, ci, h, w) as f64;
                }
            }
            let got = gk.as_slice()[ci] as f64;
            assert!(
                (got - expected).abs() < 1e-4 * expected.abs().max(1.0),
                "channel {ci}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let graph = ModelGraph::new(0.0625);
        let store: ParamStore<f32> = graph.init_params(5);
        let x = Tensor::<f32>::from_fn([1, 3, 16, 16], |_, c, h, w| {
            ((c * 13 + h * 5 + w) % 17) as f32 * 0.05
        });
        let a = forward_infer(&graph, &x, &store).unwrap();
        let b = forward_infer(&graph, &x, &store).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn checkpoint_roundtrip_forwards_identically() {
        let graph = ModelGraph::new(0.0625);
        let store: ParamStore<f32> = graph.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("init7.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        graph.validate_store(&loaded).unwrap();

        let x = Tensor::<f32>::from_fn([1, 3, 24, 24], |_, c, h, w| {
            ((c * 71 + h * 5 + w * 3) % 19) as f32 * 0.05
        });
        let from_memory = forward_infer(&graph, &x, &store).unwrap();
        let from_disk = forward_infer(&graph, &x, &loaded).unwrap();
        assert!(from_disk.bit_eq(&from_memory));
    }
}
