use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::world::vocab::{attribute_token, object_token, TokenId, N_ATTRIBUTES, N_OBJECTS};

/// Number of latent code dimensions: 12 object blocks and 6 attribute blocks of width 4.
pub const CODE_DIM: usize = 72;
const BLOCK: usize = 4;
pub const DEFAULT_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Img,
    Vid,
    Aud,
    Dep,
    Thm,
    Imu,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Img,
        Modality::Vid,
        Modality::Aud,
        Modality::Dep,
        Modality::Thm,
        Modality::Imu,
    ];

    /// Every other modality is bound to this one.
    pub const ANCHOR: Modality = Modality::Img;

    pub fn dim(self) -> usize {
        match self {
            Modality::Img | Modality::Vid => 48,
            Modality::Aud => 24,
            Modality::Dep | Modality::Thm => 16,
            Modality::Imu => 12,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Img => "img",
            Modality::Vid => "vid",
            Modality::Aud => "aud",
            Modality::Dep => "dep",
            Modality::Thm => "thm",
            Modality::Imu => "imu",
        }
    }

    pub fn index(self) -> usize {
        Modality::ALL
            .iter()
            .position(|&m| m == self)
            .expect("listed")
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownModality(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConceptScene {
    pub object: usize,
    pub attribute: usize,
    pub seed: u64,
}

impl ConceptScene {
    pub fn new(object: usize, attribute: usize, seed: u64) -> Result<Self> {
        if object >= N_OBJECTS || attribute >= N_ATTRIBUTES {
            return Err(Error::invalid(format!(
                "scene ({object}, {attribute}) out of range"
            )));
        }
        Ok(ConceptScene {
            object,
            attribute,
            seed,
        })
    }

    /// Index of the (object, attribute) pair in `0..72`.
    pub fn concept(&self) -> usize {
        self.object * N_ATTRIBUTES + self.attribute
    }

    /// Noise stream for rendering this scene in `modality`.
    pub fn render_rng(&self, modality: Modality) -> Rng {
        Rng::new(self.seed).derive("render", modality.index() as u64)
    }
}

pub fn sample_scene(rng: &mut Rng) -> ConceptScene {
    let object = rng.below(N_OBJECTS);
    let attribute = rng.below(N_ATTRIBUTES);
    let seed = rng.next_u64();
    ConceptScene {
        object,
        attribute,
        seed,
    }
}

/// Tokens of `a {attribute} {object} .`
pub fn render_caption(scene: &ConceptScene) -> Vec<TokenId> {
    let v = crate::world::vocab::Vocab::get();
    vec![
        v.id("a").expect("in vocab"),
        attribute_token(scene.attribute),
        object_token(scene.object),
        v.id(".").expect("in vocab"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub modality: Modality,
    pub observation: Tensor,
    pub scene: ConceptScene,
}

/// Fixed per-modality generator matrices that map latent concept codes to observations.
#[derive(Clone, Debug)]
pub struct World {
    generators: Vec<Tensor<f64>>,
    sigma: f64,
}

pub fn concept_code(object: usize, attribute: usize) -> [f64; CODE_DIM] {
    let mut code = [0.0; CODE_DIM];
    for i in 0..BLOCK {
        code[object * BLOCK + i] = 1.0;
        code[N_OBJECTS * BLOCK + attribute * BLOCK + i] = 1.0;
    }
    code
}

impl World {
    pub fn new(seed: u64, sigma: f64) -> Self {
        let root = Rng::new(seed);
        // Eight active code entries per concept; this scaling gives unit-variance observations.
        let std = 1.0 / ((2 * BLOCK) as f64).sqrt();
        let generators = Modality::ALL
            .iter()
            .map(|m| {
                let mut rng = root.derive("world/generator", m.index() as u64);
                Tensor::randn(&[m.dim(), CODE_DIM], std, &mut rng)
            })
            .collect();
        World { generators, sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generator(&self, modality: Modality) -> &Tensor<f64> {
        &self.generators[modality.index()]
    }

    /// Noiseless observation for a concept.
    pub fn prototype(&self, modality: Modality, object: usize, attribute: usize) -> Vec<f64> {
        let g = self.generator(modality);
        let code = concept_code(object, attribute);
        (0..modality.dim())
            .map(|r| g.row(r).iter().zip(&code).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn render(
        &self,
        scene: &ConceptScene,
        modality: Modality,
        rng: &mut Rng,
    ) -> ModalitySample {
        let proto = self.prototype(modality, scene.object, scene.attribute);
        let data: Vec<f32> = proto
            .iter()
            .map(|p| (p + self.sigma * rng.gaussian()) as f32)
            .collect();
        ModalitySample {
            modality,
            observation: Tensor::from_vec(&[modality.dim()], data).expect("dimension from table"),
            scene: *scene,
        }
    }

    /// Renders with the scene's own noise stream.
    pub fn render_scene(&self, scene: &ConceptScene, modality: Modality) -> ModalitySample {
        self.render(scene, modality, &mut scene.render_rng(modality))
    }

    /// Renders by modality name, rejecting unknown names.
    pub fn render_named(
        &self,
        scene: &ConceptScene,
        modality: &str,
        rng: &mut Rng,
    ) -> Result<ModalitySample> {
        let m: Modality = modality.parse()?;
        Ok(self.render(scene, m, rng))
    }
}
