use crate::error::{Error, Result};
use crate::estimator::{adam_step, mse_masked_loss_with_grad, KeypointMask, Tensor};
use crate::geometry::{
    decode_argmax, render_gaussian_heatmaps, warp_heatmap, warp_image, warp_points, Affine, Frame, Heatmap, Image,
    Pose,
};
use crate::pcm::{pcm_correct, Model, PcmCandidates, PcmResult, PlCandidate, SourceEpoch};
use crate::ssco::ssco_apply;
use crate::synthdata::{Sample, HEATMAP_STRIDE};

use super::{to_heatmap, MaskSteps, NetId, Trainer};

/// Student inputs and teacher targets for one cross-teaching step, built
/// before the student is updated.
#[derive(Clone, Debug)]
pub struct CrossBatch {
    pub teacher: NetId,
    pub student: NetId,
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub mask: KeypointMask,
}

#[derive(Clone, Debug)]
pub struct Step4Output {
    pub loss: f64,
    pub pcm: Vec<PcmResult>,
}

fn fill_of(img: &Image) -> f32 {
    img.mean() as f32
}

fn mask_row(hm: &Heatmap, tau: f64) -> Vec<bool> {
    decode_argmax(hm)
        .keypoints
        .iter()
        .map(|k| k.conf >= tau && k.conf > 0.0)
        .collect()
}

/// Canonical image-pixel keypoints decoded from a canonical heatmap.
fn pseudo_keypoints(canonical: &Heatmap) -> Pose {
    decode_argmax(canonical).heatmap_to_image(HEATMAP_STRIDE)
}

impl<'d> Trainer<'d> {
    fn step_name(student: NetId) -> &'static str {
        match student {
            NetId::B => "step2",
            NetId::A => "step3",
            NetId::C => "step4",
        }
    }

    fn check_loss(&self, loss: f64, step: &'static str) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch: self.batch,
                step,
            })
        }
    }

    fn checksum(&self, id: NetId) -> u64 {
        self.params(id).expect("net present").checksum()
    }

    fn verify_frozen(&mut self, id: NetId, before: u64) -> Result<()> {
        self.counters.frozen_checks += 1;
        if self.checksum(id) != before {
            self.counters.teacher_mutations += 1;
            return Err(Error::TeacherMutated {
                net: id.name().to_string(),
            });
        }
        Ok(())
    }

    /// Forward, masked loss and (optionally weighted) Adam update of one net.
    fn fit(&mut self, id: NetId, x: &Tensor<f32>, target: &Tensor<f32>, mask: &KeypointMask, weight: f64, step: &'static str) -> Result<f64> {
        if id == NetId::C {
            self.counters.net_c_forwards += 1;
        }
        let lr = self.lr;
        let net = self.nets[id as usize].as_mut().expect("net present");
        let (y, tape) = net.params.forward_train(x);
        let (loss, dy) = mse_masked_loss_with_grad(&y, target, mask);
        self.check_loss(loss, step)?;
        if weight > 0.0 && mask.count() > 0 {
            let net = self.nets[id as usize].as_mut().expect("net present");
            let mut grads = net.params.backward(tape, &dy);
            if weight != 1.0 {
                grads.scale(weight as f32);
            }
            adam_step(&mut net.adam, &mut net.params, &grads, lr)?;
        }
        Ok(loss)
    }

    /// Trains every active net on the same easy-augmented labeled batch and
    /// returns the sum of their losses.
    pub fn train_step1_supervised(&mut self, batch: &[&Sample]) -> Result<f64> {
        self.counters.step1_calls += 1;
        let dims = self.image_dims;
        let mut images = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let gt = s
                .pose
                .as_ref()
                .unwrap_or_else(|| panic!("sample {} in the supervised batch has no label", s.id));
            let e = self.cfg.easy_aug.sample(&mut self.step1_rng, dims, Frame::Easy);
            images.push(warp_image(&s.image, &e, dims, fill_of(&s.image))?);
            let pts = warp_points(gt, &e).image_to_heatmap(HEATMAP_STRIDE);
            rows.push(
                pts.keypoints
                    .iter()
                    .map(|k| k.is_valid() && self.hm_dims.contains(k.x, k.y))
                    .collect(),
            );
            targets.push(render_gaussian_heatmaps(&pts, self.cfg.sigma, self.hm_dims)?);
        }
        let x = Tensor::from_images(&images.iter().collect::<Vec<_>>());
        let t = Tensor::from_heatmaps(&targets.iter().collect::<Vec<_>>());
        let mask = KeypointMask::from_rows(rows);
        let mut total = 0.0;
        for id in NetId::ALL {
            if self.nets[id as usize].is_some() {
                total += self.fit(id, &x, &t, &mask, 1.0, "step1")?;
            }
        }
        Ok(total)
    }

    fn draw_views(&mut self, rng_of: Option<usize>, n: usize) -> Vec<(Affine, Affine)> {
        let dims = self.image_dims;
        let (easy, hard) = (self.cfg.easy_aug, self.cfg.hard_aug);
        let rng = match rng_of {
            Some(i) => &mut self.cross_rng[i],
            None => &mut self.step4_rng,
        };
        (0..n)
            .map(|_| {
                let e = easy.sample(rng, dims, Frame::Easy);
                let h = hard.sample(rng, dims, Frame::Hard);
                (e, h)
            })
            .collect()
    }

    fn teacher_pass(&mut self, id: NetId, batch: &[&Sample], views: &[(Affine, Affine)]) -> Result<Vec<Heatmap>> {
        let dims = self.image_dims;
        let easy: Vec<Image> = batch
            .iter()
            .zip(views)
            .map(|(s, (e, _))| warp_image(&s.image, e, dims, fill_of(&s.image)))
            .collect::<Result<_>>()?;
        if id == NetId::C {
            self.counters.net_c_forwards += 1;
        }
        let params = self.params(id).expect("net present");
        Ok(params
            .forward(&Tensor::from_images(&easy.iter().collect::<Vec<_>>()))
            .to_heatmaps(Frame::Easy))
    }

    /// Occludes each sample with a patch from the next sample in the batch,
    /// then applies its hard view.
    fn student_inputs(&mut self, batch: &[&Sample], kps: &[Pose], views: &[(Affine, Affine)], rng_of: Option<usize>) -> Result<Tensor<f32>> {
        let dims = self.image_dims;
        let n = batch.len();
        let ssco = self.cfg.ssco.clone();
        let rng = match rng_of {
            Some(i) => &mut self.cross_rng[i],
            None => &mut self.step4_rng,
        };
        let mut hard = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let occluded = ssco_apply(&batch[i].image, &kps[i], &batch[j].image, &kps[j], &ssco, rng);
            hard.push(warp_image(&occluded, &views[i].1, dims, fill_of(&batch[i].image))?);
        }
        Ok(Tensor::from_images(&hard.iter().collect::<Vec<_>>()))
    }

    /// Builds the hard-view student batch and the teacher's easy-view targets
    /// mapped into the hard frame. The teacher is only read.
    pub fn cross_targets(&mut self, teacher: NetId, student: NetId, batch: &[&Sample]) -> Result<CrossBatch> {
        assert!(
            teacher != student && teacher != NetId::C && student != NetId::C,
            "cross steps exchange nets A and B"
        );
        self.counters.cross_calls += 1;
        let teacher_checksum = self.checksum(teacher);
        let stream = Some(student as usize);
        let views = self.draw_views(stream, batch.len());
        let hm_e = self.teacher_pass(teacher, batch, &views)?;
        self.verify_frozen(teacher, teacher_checksum)?;
        let mut targets = Vec::with_capacity(batch.len());
        let mut kps = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        for (hm, (e, h)) in hm_e.iter().zip(&views) {
            let e_inv = to_heatmap(e).inverse();
            let target = warp_heatmap(hm, &e_inv.then(&to_heatmap(h)), self.hm_dims)?;
            let canonical = warp_heatmap(hm, &e_inv, self.hm_dims)?;
            rows.push(match self.cfg.mask_steps {
                MaskSteps::All => mask_row(&target, self.cfg.tau),
                MaskSteps::Step4Only => vec![true; self.keypoints],
            });
            kps.push(pseudo_keypoints(&canonical));
            targets.push(target);
        }
        let inputs = self.student_inputs(batch, &kps, &views, stream)?;
        Ok(CrossBatch {
            teacher,
            student,
            inputs,
            targets: Tensor::from_heatmaps(&targets.iter().collect::<Vec<_>>()),
            mask: KeypointMask::from_rows(rows),
        })
    }

    /// Updates the student on a prepared cross batch and confirms the
    /// teacher did not move.
    pub fn apply_cross(&mut self, b: CrossBatch) -> Result<f64> {
        let beta = self.cfg.beta;
        let before = self.checksum(b.teacher);
        let loss = self.fit(b.student, &b.inputs, &b.targets, &b.mask, beta, Self::step_name(b.student))?;
        self.verify_frozen(b.teacher, before)?;
        Ok(loss)
    }

    /// One cross-teaching step: `teacher` supervises `student`.
    pub fn train_step_cross(&mut self, teacher: NetId, student: NetId, batch: &[&Sample]) -> Result<f64> {
        let b = self.cross_targets(teacher, student, batch)?;
        self.apply_cross(b)
    }

    /// Net C learns from the corrected pseudo-labels of the frozen nets A and
    /// B. Current A/B canonical heatmaps are staged in the cache.
    pub fn train_step4_pcm(&mut self, batch: &[&Sample]) -> Result<Step4Output> {
        self.counters.step4_calls += 1;
        let (ca, cb) = (self.checksum(NetId::A), self.checksum(NetId::B));
        let views = self.draw_views(None, batch.len());
        let hm_a = self.teacher_pass(NetId::A, batch, &views)?;
        let hm_b = self.teacher_pass(NetId::B, batch, &views)?;
        let mut targets = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        let mut kps = Vec::with_capacity(batch.len());
        let mut results = Vec::with_capacity(batch.len());
        for (((s, a), b), (e, h)) in batch.iter().zip(&hm_a).zip(&hm_b).zip(&views) {
            let e_inv = to_heatmap(e).inverse();
            let can_a = warp_heatmap(a, &e_inv, self.hm_dims)?;
            let can_b = warp_heatmap(b, &e_inv, self.hm_dims)?;
            let a_last = self.cache.get(s.id, Model::A).map(|hm| PlCandidate::new(Model::A, SourceEpoch::Last, hm.clone()));
            let b_last = self.cache.get(s.id, Model::B).map(|hm| PlCandidate::new(Model::B, SourceEpoch::Last, hm.clone()));
            let a_cur = PlCandidate::new(Model::A, SourceEpoch::Current, can_a);
            let b_cur = PlCandidate::new(Model::B, SourceEpoch::Current, can_b);
            let set = PcmCandidates {
                a_last: a_last.as_ref(),
                a_cur: &a_cur,
                b_last: b_last.as_ref(),
                b_cur: &b_cur,
            };
            self.counters.pcm_calls += 1;
            let r = pcm_correct(&set, &to_heatmap(h), self.hm_dims, self.cfg.tau);
            rows.push(r.keypoint_mask.clone());
            targets.push(r.fused.clone());
            kps.push(pseudo_keypoints(a_cur.heatmap()));
            self.cache.update(s.id, Model::A, a_cur.heatmap().clone());
            self.cache.update(s.id, Model::B, b_cur.heatmap().clone());
            self.counters.cache_updates += 2;
            results.push(r);
        }
        let inputs = self.student_inputs(batch, &kps, &views, None)?;
        let target = Tensor::from_heatmaps(&targets.iter().collect::<Vec<_>>());
        let mask = KeypointMask::from_rows(rows);
        let loss = self.fit(NetId::C, &inputs, &target, &mask, self.cfg.beta, "step4")?;
        self.verify_frozen(NetId::A, ca)?;
        self.verify_frozen(NetId::B, cb)?;
        Ok(Step4Output { loss, pcm: results })
    }
}
