use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use super::eval::denoise_sequence;
use super::optim::{cosine_lr, Adam};
use crate::autodiff::Graph;
use crate::data::{add_awgn, mean_db, psnr, synth_sequence, FrameSequence, SynthKind};
use crate::error::{Error, Result};
use crate::losses::{l1_data_loss, total_loss, weight_rows};
use crate::net::{GrtnParams, Net};
use crate::tensor::{Element, Tensor};

/// Seed offset separating the data stream from weight initialization.
const DATA_STREAM: u64 = 0x5EED_DA7A;
const VALIDATION_FRAMES: usize = 6;

/// One clip of `clip_length` frames for every batch element.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Per frame, `[N, C, H, W]`.
    pub clean: Vec<Tensor<T>>,
    pub noisy: Vec<Tensor<T>>,
    pub sigmas: Vec<f64>,
}

/// Stacks frame `t` of every sequence into `[N, C, H, W]`.
pub fn stack_frames<T: Element>(seqs: &[&FrameSequence], t: usize) -> Tensor<T> {
    let frames: Vec<&Tensor<f64>> = seqs.iter().map(|s| &s.frames[t]).collect();
    let per = frames[0].numel();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    Tensor::from_fn(&shape, |i| T::of(frames[i / per].data()[i % per]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    /// Mean training loss over the iterations since the previous row.
    pub loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<CurveRow>,
    /// Total loss of every iteration, in order.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_psnr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.4}\n", r.iteration, r.loss, r.val_psnr));
        }
        out
    }
}

/// Training state: everything a checkpoint must hold to resume exactly.
pub struct Trainer<T> {
    pub run: RunConfig,
    pub params: GrtnParams<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    validation: (FrameSequence, FrameSequence),
}

fn validation_clip(run: &RunConfig) -> Result<(FrameSequence, FrameSequence)> {
    let seed = run.train.seed ^ 0x0000_7A11_D000;
    let side = run.train.patch_size;
    let clean = synth_sequence(
        SynthKind::MovingShapes,
        VALIDATION_FRAMES,
        (side, side),
        run.model.image_channels,
        seed,
    )?;
    let noisy = add_awgn(&clean, run.train.val_sigma, seed.wrapping_add(1))?;
    Ok((clean, noisy))
}

impl<T: Element> Trainer<T> {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let params = GrtnParams::init(&run.model, run.train.seed)?;
        let adam = Adam::new(run.train.adam(), &params.store);
        let rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ DATA_STREAM);
        let validation = validation_clip(&run)?;
        Ok(Trainer {
            run,
            params,
            adam,
            rng,
            iteration: 0,
            validation,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.run.validate()?;
        let params = GrtnParams::from_store(&ck.run.model, ck.params)?;
        let validation = validation_clip(&ck.run)?;
        Ok(Trainer {
            params,
            adam: ck.adam,
            rng: ck.rng.restore(),
            iteration: ck.iteration,
            validation,
            run: ck.run,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            run: self.run.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            params: self.params.store.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn sample_batch(&mut self) -> Result<Batch<T>> {
        let tc = &self.run.train;
        let mut clean = Vec::with_capacity(tc.batch_size);
        let mut noisy = Vec::with_capacity(tc.batch_size);
        let mut sigmas = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let kind = SynthKind::ALL[self.rng.gen_range(0..SynthKind::ALL.len())];
            let seq_seed: u64 = self.rng.gen();
            let sigma = if tc.sigma_max > tc.sigma_min {
                self.rng.gen_range(tc.sigma_min..=tc.sigma_max)
            } else {
                tc.sigma_min
            };
            let noise_seed: u64 = self.rng.gen();
            let c = synth_sequence(
                kind,
                tc.clip_length,
                (tc.patch_size, tc.patch_size),
                self.run.model.image_channels,
                seq_seed,
            )?;
            noisy.push(add_awgn(&c, sigma, noise_seed)?);
            clean.push(c);
            sigmas.push(sigma);
        }
        let cr: Vec<&FrameSequence> = clean.iter().collect();
        let nr: Vec<&FrameSequence> = noisy.iter().collect();
        Ok(Batch {
            clean: (0..tc.clip_length).map(|t| stack_frames(&cr, t)).collect(),
            noisy: (0..tc.clip_length).map(|t| stack_frames(&nr, t)).collect(),
            sigmas,
        })
    }

    /// Total loss and per-parameter gradients over one clip, with gradients
    /// flowing through the recurrence.
    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new();
        let bound = self.params.store.bind(&mut g, true);
        let net = Net {
            config: &self.params.config,
            layout: &self.params.layout,
            bound: &bound,
        };
        let mut state = None;
        let mut data = None;
        for (x, y) in batch.noisy.iter().zip(&batch.clean) {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let (pred, next) = net.step(&mut g, state, xv, &batch.sigmas)?;
            state = Some(next);
            let l = l1_data_loss(&mut g, pred, yv)?;
            data = Some(match data {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let data = data.ok_or_else(|| Error::Config("empty clip".into()))?;
        let data = g.affine(data, 1.0 / batch.noisy.len() as f64, 0.0);
        let mats = weight_rows(&mut g, &bound, &self.params.layout.rsste_linear_weights())?;
        let loss = total_loss(&mut g, data, &mats, &self.run.train.loss())?;
        let value = g.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let grads = bound.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((value, grads))
    }

    /// Samples a clip and applies one optimizer update.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch()?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration + 1,
                loss,
            });
        }
        let tc = &self.run.train;
        let lr = cosine_lr(self.iteration, tc.iterations.max(1), tc.base_lr, tc.lr_floor)?;
        self.adam.step(&mut self.params.store, &grads, lr)?;
        self.iteration += 1;
        Ok(loss)
    }

    /// Mean denoised PSNR on the fixed validation clip.
    pub fn validate(&self) -> Result<f64> {
        let (clean, noisy) = &self.validation;
        let out = denoise_sequence(&self.params, noisy)?;
        let values = out
            .iter()
            .zip(&clean.frames)
            .map(|(d, c)| psnr(d, c, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_db(&values))
    }

    /// Trains until `until` iterations have been applied in total.
    pub fn run_until(&mut self, until: usize, mut on_row: impl FnMut(&CurveRow)) -> Result<TrainLog> {
        let until = until.min(self.run.train.iterations);
        let every = self.run.train.log_every;
        let mut log = TrainLog::default();
        let mut window = Vec::new();
        while self.iteration < until {
            let loss = self.train_step()?;
            log.losses.push(loss);
            window.push(loss);
            if self.iteration % every == 0 || self.iteration == until {
                let row = CurveRow {
                    iteration: self.iteration,
                    loss: window.iter().sum::<f64>() / window.len() as f64,
                    val_psnr: self.validate()?,
                };
                window.clear();
                on_row(&row);
                log.rows.push(row);
            }
        }
        Ok(log)
    }

    pub fn run(&mut self, on_row: impl FnMut(&CurveRow)) -> Result<TrainLog> {
        self.run_until(self.run.train.iterations, on_row)
    }
}
