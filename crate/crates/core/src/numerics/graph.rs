use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Binder, Gradients, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// A tape bound to a parameter store for a single forward/backward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    binder: Binder,
    store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Graph<'a> {
    /// Trainable parameters are differentiated; dropout is off.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            binder: Binder::new(),
            store,
            dropout: None,
        }
    }

    /// No parameter is differentiated; dropout is off.
    pub fn inference(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            binder: Binder::frozen(),
            store,
            dropout: None,
        }
    }

    /// Training pass with dropout at `rate` driven by `seed`.
    pub fn training(store: &'a ParamStore, rate: f64, seed: u64) -> Self {
        let mut g = Self::new(store);
        if rate > 0.0 {
            g.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        g
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.bind(&mut self.tape, self.store, name)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.binder.var(name)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some((rate, rng)) => self.tape.dropout(x, *rate, rng),
            None => x,
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        Ok(self.binder.gradients(&self.tape))
    }
}
