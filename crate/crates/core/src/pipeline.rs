//! The contrastive run end to end: prompts, vocabulary, fresh parameters,
//! fine-tuning and evaluation on a held-out manifest.

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledImages, Manifest};
use crate::encoders::{EncoderConfig, JointModel, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::zero_shot_classify;
use crate::metrics::{top_k_accuracy, MetricsReport, Prediction};
use crate::params::ParamStore;
use crate::prompts::{build_class_prompts, ClassPrompt, PromptTemplate};
use crate::seeding::sub_seed;
use crate::taxonomy::{Level, Taxonomy};
use crate::training::{fine_tune, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePipeline {
    pub taxonomy_csv: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub template: PromptTemplate,
}

#[derive(Clone, Debug)]
pub struct ContrastiveRun {
    pub model: JointModel,
    pub params: ParamStore,
    pub logs: Vec<EpochLog>,
    pub zero_shot: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub report: MetricsReport,
}

impl ContrastivePipeline {
    pub fn new(taxonomy: &Taxonomy, encoder: EncoderConfig, train: TrainConfig) -> Result<Self> {
        encoder.validate()?;
        Ok(ContrastivePipeline {
            taxonomy_csv: taxonomy.to_csv(),
            encoder,
            template: train.prompt.template(),
            train,
        })
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::parse(&self.taxonomy_csv)
    }

    pub fn prompts(&self) -> Result<Vec<ClassPrompt>> {
        build_class_prompts(&self.taxonomy()?, &self.template)
    }

    /// Model whose vocabulary covers exactly the class prompts.
    pub fn model(&self) -> Result<JointModel> {
        let prompts = self.prompts()?;
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        JointModel::new(self.encoder, Vocabulary::build(&texts)?)
    }

    /// Fresh parameters for a run seeded with `seed`.
    pub fn init_params(&self, model: &JointModel, seed: u64) -> Result<ParamStore> {
        model.init_params(sub_seed(seed, "init"))
    }

    pub fn load(&self, manifest: &Manifest) -> Result<LabeledImages> {
        LabeledImages::load(manifest, self.encoder.image_side)
    }

    /// Fresh init, zero-shot baseline, fine-tune, then held-out evaluation.
    pub fn run(&self, train: &Manifest, test: &Manifest, seed: u64) -> Result<ContrastiveRun> {
        self.run_loaded(&self.load(train)?, &self.load(test)?, seed)
    }

    pub fn run_loaded(&self, train: &LabeledImages, test: &LabeledImages, seed: u64) -> Result<ContrastiveRun> {
        let taxonomy = self.taxonomy()?;
        let prompts = self.prompts()?;
        let model = self.model()?;
        let mut params = self.init_params(&model, seed)?;
        let zero_shot = MetricsReport::compute(
            &zero_shot_classify(&model, &params, test, &prompts, &taxonomy)?,
            &taxonomy,
        )?;
        let config = TrainConfig {
            seed: sub_seed(seed, "train"),
            ..self.train
        };
        let logs = fine_tune(&model, &mut params, train, &prompts, &config, None)?;
        let predictions = zero_shot_classify(&model, &params, test, &prompts, &taxonomy)?;
        let report = MetricsReport::compute(&predictions, &taxonomy)?;
        Ok(ContrastiveRun {
            model,
            params,
            logs,
            zero_shot,
            predictions,
            report,
        })
    }

    /// Held-out top-1 after every epoch, for learning curves.
    pub fn heldout_top1(
        &self,
        model: &JointModel,
        params: &ParamStore,
        test: &LabeledImages,
    ) -> Result<f64> {
        let taxonomy = self.taxonomy()?;
        let preds = zero_shot_classify(model, params, test, &self.prompts()?, &taxonomy)?;
        top_k_accuracy(&preds, &taxonomy, Level::L3, 1)
    }

    pub fn check_manifest(&self, manifest: &Manifest) -> Result<()> {
        let n = self.taxonomy()?.len();
        if manifest.num_classes() != n {
            return Err(Error::Config(format!(
                "manifest labels {} classes, taxonomy has {n}",
                manifest.num_classes()
            )));
        }
        Ok(())
    }
}
