use super::blocks::Block;
use super::head::Head;
use super::spec::{BackboneSpec, HeadKind};
use super::stem::Stem;
use crate::error::{Error, Result};
use crate::nn::{self, join, Module, Param};
use crate::partition::StagePlan;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

fn make_stem<T: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<Stem<T>> {
    Stem::new(&spec.stem, spec.input, &mut rng::stream(seed, "stem", 0))
}

fn make_block<T: Scalar>(spec: &BackboneSpec, i: usize, seed: u64) -> Block<T> {
    Block::new(&spec.blocks[i], &mut rng::stream(seed, "block", i as u64))
}

fn make_head<T: Scalar>(spec: &BackboneSpec, k: usize, kind: HeadKind, in_width: usize, seed: u64) -> Head<T> {
    let mut r = match kind {
        HeadKind::Progressive => rng::stream(seed, "head", k as u64),
        HeadKind::Final => rng::stream(seed, "final-head", 0),
    };
    Head::new(kind, spec.family.is_convolutional(), in_width, spec.num_classes, &mut r)
}

/// Parameter-name prefix of the head attached at stage `k`. Progressive heads carry their
/// stage index so a grown network can never reuse an earlier head's names.
pub fn head_prefix(spec: &BackboneSpec, k: usize, kind: HeadKind) -> String {
    match (kind, spec.family.is_convolutional()) {
        (HeadKind::Progressive, _) => format!("heads.{k}"),
        (HeadKind::Final, true) => "fc".to_string(),
        (HeadKind::Final, false) => "head".to_string(),
    }
}

/// The stem and every block of a backbone, in order, with their initial weights.
pub struct OrderedBlocks<T> {
    pub spec: BackboneSpec,
    pub seed: u64,
    pub stem: Stem<T>,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> OrderedBlocks<T> {
    /// Stem, all blocks, and the final classifier: the standard architecture.
    pub fn into_full_network(self) -> Result<PrefixNetwork<T>> {
        let plan = StagePlan::new(self.spec.block_count(), 1)?;
        build_prefix(self, &plan, 1, HeadKind::Final)
    }
}

/// Instantiates the stem and all blocks. Each component draws its initial weights from its
/// own stream, so block `i` gets the same weights whichever network it ends up in.
pub fn build_backbone<T: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<OrderedBlocks<T>> {
    spec.validate()?;
    Ok(OrderedBlocks {
        spec: spec.clone(),
        seed,
        stem: make_stem(spec, seed)?,
        blocks: (0..spec.block_count()).map(|i| make_block(spec, i, seed)).collect(),
    })
}

/// Keeps the stem and the blocks of stages `1..=k`, drops the rest and attaches a fresh head.
pub fn build_prefix<T: Scalar>(
    backbone: OrderedBlocks<T>,
    plan: &StagePlan,
    k: usize,
    head: HeadKind,
) -> Result<PrefixNetwork<T>> {
    let OrderedBlocks { spec, seed, stem, mut blocks } = backbone;
    check_plan(&spec, plan)?;
    let active = plan.active_blocks(k)?;
    blocks.truncate(active);
    let width = prefix_width(&spec, active);
    Ok(PrefixNetwork {
        head: make_head(&spec, k, head, width, seed),
        head_name: head_prefix(&spec, k, head),
        head_kind: head,
        spec,
        plan: plan.clone(),
        stage: k,
        seed,
        stem,
        blocks,
    })
}

fn check_plan(spec: &BackboneSpec, plan: &StagePlan) -> Result<()> {
    if plan.block_count() != spec.block_count() {
        return Err(Error::InvalidPlan(format!(
            "plan covers {} blocks but {} has {}",
            plan.block_count(),
            spec.name,
            spec.block_count()
        )));
    }
    Ok(())
}

fn prefix_width(spec: &BackboneSpec, active: usize) -> usize {
    if active == 0 {
        spec.stem_width()
    } else {
        spec.blocks[active - 1].out_width()
    }
}

/// Stem, the blocks of stages `1..=k`, and one classification head.
pub struct PrefixNetwork<T> {
    spec: BackboneSpec,
    plan: StagePlan,
    stage: usize,
    seed: u64,
    head_kind: HeadKind,
    head_name: String,
    pub stem: Stem<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> PrefixNetwork<T> {
    /// Freshly initialized prefix for stage `k`; equivalent to `build_prefix(build_backbone(..))`
    /// without instantiating the inactive blocks.
    pub fn new(spec: &BackboneSpec, plan: &StagePlan, k: usize, head: HeadKind, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_plan(spec, plan)?;
        let active = plan.active_blocks(k)?;
        let backbone = OrderedBlocks {
            spec: spec.clone(),
            seed,
            stem: make_stem(spec, seed)?,
            blocks: (0..active).map(|i| make_block(spec, i, seed)).collect(),
        };
        build_prefix(backbone, plan, k, head)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn head_name(&self) -> &str {
        &self.head_name
    }

    pub fn active_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn trainable_param_count(&self) -> usize {
        nn::trainable_param_count(self)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let i = self.spec.input;
        if x.ndim() != 4 || x.shape()[1..] != [i.channels, i.height, i.width] {
            return Err(Error::shape(
                "network input",
                ["batch", &i.channels.to_string(), &i.height.to_string(), &i.width.to_string()],
                x.shape(),
            ));
        }
        Ok(())
    }

    /// Evaluation-mode activations after the stem and the first `upto` blocks.
    pub fn features(&self, x: &Tensor<T>, upto: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if upto > self.blocks.len() {
            return Err(Error::InvalidPlan(format!(
                "requested features after block {upto} but only {} are active",
                self.blocks.len()
            )));
        }
        let mut h = self.stem.forward(x)?;
        for b in &self.blocks[..upto] {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    /// Replaces the current head with a fresh one of `kind`. Used to swap in the standard
    /// classifier at the last stage.
    pub fn replace_head(&mut self, kind: HeadKind) {
        let width = prefix_width(&self.spec, self.blocks.len());
        self.head = make_head(&self.spec, self.stage, kind, width, self.seed);
        self.head_name = head_prefix(&self.spec, self.stage, kind);
        self.head_kind = kind;
    }
}

impl<T: Scalar> Module<T> for PrefixNetwork<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.features(x, self.blocks.len())?;
        self.head.forward(&h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward_train(x)?;
        for b in &mut self.blocks {
            h = b.forward_train(&h)?;
        }
        self.head.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head.visit(&join(prefix, &self.head_name), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        let name = self.head_name.clone();
        self.head.visit_mut(&join(prefix, &name), f);
    }
}

/// Advances a stage-`k` network to stage `k + 1`: the stem and blocks `1..=n_k` are kept as
/// they are, the blocks of stage `k + 1` are initialized from `seed`, and the old head is
/// dropped in favour of a fresh one.
pub fn grow<T: Scalar>(prev: PrefixNetwork<T>, head: HeadKind, seed: u64) -> Result<PrefixNetwork<T>> {
    let next = prev.stage + 1;
    let PrefixNetwork { spec, plan, stem, mut blocks, .. } = prev;
    let range = plan.stage_blocks(next)?;
    if blocks.len() != range.start {
        return Err(Error::CheckpointMismatch(format!(
            "network has {} blocks but stage {next} starts at block {}",
            blocks.len(),
            range.start
        )));
    }
    blocks.extend(range.map(|i| make_block(&spec, i, seed)));
    let width = prefix_width(&spec, blocks.len());
    Ok(PrefixNetwork {
        head: make_head(&spec, next, head, width, seed),
        head_name: head_prefix(&spec, next, head),
        head_kind: head,
        spec,
        plan,
        stage: next,
        seed,
        stem,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::spec::{InputShape, Preset};
    use crate::nn::param_names;

    fn tiny() -> BackboneSpec {
        Preset::TinyResNet.spec_with_input(5, InputShape::square(1, 16)).unwrap()
    }

    fn probe(spec: &BackboneSpec, b: usize) -> Tensor<f32> {
        let i = spec.input;
        let mut x = Tensor::zeros(&[b, i.channels, i.height, i.width]);
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((j * 37 % 101) as f32 / 50.0) - 1.0;
        }
        x
    }

    #[test]
    fn prefix_contains_only_active_blocks() {
        let spec = tiny();
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        let net = build_prefix(build_backbone::<f32>(&spec, 1).unwrap(), &plan, 1, HeadKind::Progressive).unwrap();
        assert_eq!(net.active_blocks(), 2);
        assert_eq!(net.trainable_param_count(), spec.prefix_param_count(2, HeadKind::Progressive));
        assert!(param_names(&net).iter().all(|n| !n.starts_with("blocks.2")));
        assert_eq!(net.forward(&probe(&spec, 3)).unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn new_matches_build_prefix() {
        let spec = tiny();
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        let a = build_prefix(build_backbone::<f32>(&spec, 9).unwrap(), &plan, 1, HeadKind::Progressive).unwrap();
        let b = PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Progressive, 9).unwrap();
        let x = probe(&spec, 2);
        assert_eq!(a.forward(&x).unwrap().data(), b.forward(&x).unwrap().data());
    }

    #[test]
    fn prefix_equals_manual_composition() {
        let spec = tiny();
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        let net = PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Progressive, 3).unwrap();
        let x = probe(&spec, 2);
        let mut h = net.stem.forward(&x).unwrap();
        for b in &net.blocks {
            h = b.forward(&h).unwrap();
        }
        assert_eq!(net.head.forward(&h).unwrap().data(), net.forward(&x).unwrap().data());
    }

    #[test]
    fn grow_keeps_prefix_and_replaces_head() {
        let spec = tiny();
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        let net = PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Progressive, 3).unwrap();
        let x = probe(&spec, 2);
        let before = net.features(&x, 2).unwrap();
        let old_head: Vec<String> = param_names(&net).into_iter().filter(|n| n.starts_with("heads.")).collect();
        let grown = grow(net, HeadKind::Final, 3).unwrap();
        assert_eq!(grown.features(&x, 2).unwrap().data(), before.data());
        let names = param_names(&grown);
        assert!(old_head.iter().all(|n| !names.contains(n)));
        assert_eq!(grown.trainable_param_count(), spec.full_param_count());
        assert!(grow(grown, HeadKind::Final, 3).is_err());
    }

    #[test]
    fn full_network_is_stage_one_of_single_stage_plan() {
        let spec = tiny();
        let net = build_backbone::<f32>(&spec, 0).unwrap().into_full_network().unwrap();
        assert_eq!(net.trainable_param_count(), spec.full_param_count());
        assert_eq!(net.head_name(), "fc");
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let spec = tiny();
        let net = build_backbone::<f32>(&spec, 0).unwrap().into_full_network().unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 3, 16, 16])), Err(Error::Shape { .. })));
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let spec = tiny();
        let plan = StagePlan::new(spec.block_count() + 1, 2).unwrap();
        assert!(PrefixNetwork::<f32>::new(&spec, &plan, 1, HeadKind::Progressive, 0).is_err());
        let plan = StagePlan::new(spec.block_count(), 2).unwrap();
        assert!(matches!(
            PrefixNetwork::<f32>::new(&spec, &plan, 3, HeadKind::Progressive, 0),
            Err(Error::StageOutOfRange { .. })
        ));
    }
}
