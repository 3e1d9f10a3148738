//! Whole-model assembly: encoder, fusion module and prediction head over a
//! single parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::FusionModule;
use crate::head::{self, Head, MergedHead, TrainHead};
use crate::tensor::{ParamStore, Real};

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: Config,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub fusion: FusionModule,
    pub head: Head,
}

impl<T: Real> Model<T> {
    /// Randomly initialized training-form model.
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let fusion = FusionModule::new(
            &mut store,
            cfg.embed_dim,
            cfg.heads,
            cfg.fusion_residual,
            &mut rng,
        )?;
        let head = Head::Train(TrainHead::new(
            &mut store,
            cfg.embed_dim,
            cfg.head_blocks,
            &mut rng,
        ));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            fusion,
            head,
        })
    }

    /// Merged-form skeleton with zero weights, to be filled from a file.
    pub fn new_merged_uninit(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let fusion = FusionModule::new(
            &mut store,
            cfg.embed_dim,
            cfg.heads,
            cfg.fusion_residual,
            &mut rng,
        )?;
        let head = Head::Merged(MergedHead::new_uninit(
            &mut store,
            cfg.embed_dim,
            cfg.head_blocks,
        ));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            fusion,
            head,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.head.is_merged()
    }

    /// Exact structural re-parameterization: every RepConv block collapsed
    /// into one 5x5 convolution; encoder and fusion weights carried over
    /// unchanged.
    pub fn reparameterize(&self) -> Result<Model<T>> {
        let train_head = match &self.head {
            Head::Train(h) => h,
            Head::Merged(_) => {
                return Err(Error::contract(
                    "model is already in merged form; no further transform is defined",
                ))
            }
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::new(&mut store, &self.cfg, &mut rng)?;
        let fusion = FusionModule::new(
            &mut store,
            self.cfg.embed_dim,
            self.cfg.heads,
            self.cfg.fusion_residual,
            &mut rng,
        )?;
        // Carry shared weights over by name.
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let dst = store.find(&name).expect("freshly registered");
            let src = self
                .store
                .find(&name)
                .ok_or_else(|| Error::contract(format!("missing source tensor '{name}'")))?;
            store.set_value(dst, self.store.value(src).clone())?;
        }
        let head = Head::Merged(head::reparameterize(&self.store, train_head, &mut store)?);
        Ok(Model {
            cfg: self.cfg.clone(),
            store,
            encoder,
            fusion,
            head,
        })
    }
}
