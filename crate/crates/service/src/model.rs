use image::RgbImage;
use tamperscope_core::domain::DomainTag;
use tamperscope_core::pipeline::{Analysis, ModelVersions, Pipeline, PipelineError, TextTurn};
use tamperscope_core::Scalar;

/// Read-only model handle shared by all requests.
pub trait ForensicModel: Send + Sync + 'static {
    fn versions(&self) -> ModelVersions;
    fn analyze(&self, image: &RgbImage) -> Result<Analysis, PipelineError>;
    fn follow_up(&self, image: &RgbImage, tag: &DomainTag, opening: &TextTurn, turns: &[TextTurn], question: &str) -> Result<String, PipelineError>;
}

impl<F: Scalar + Send + Sync + 'static> ForensicModel for Pipeline<F> {
    fn versions(&self) -> ModelVersions {
        Pipeline::versions(self)
    }

    fn analyze(&self, image: &RgbImage) -> Result<Analysis, PipelineError> {
        Pipeline::analyze(self, image)
    }

    fn follow_up(&self, image: &RgbImage, tag: &DomainTag, opening: &TextTurn, turns: &[TextTurn], question: &str) -> Result<String, PipelineError> {
        Pipeline::follow_up(self, &self.image_tokens(image), tag, opening, turns, question)
    }
}
