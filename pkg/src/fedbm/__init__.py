"""Federated learning with a frozen concept-distribution classifier and a
server-side conditional generator, on small numpy models."""

from .concept_space import (
    CEB1Error,
    CEB1HeaderError,
    CEB1PayloadError,
    CEB1PromptCountError,
    CEB1ValueError,
    ConceptDistribution,
    ConceptEmbeddingSet,
    DistributionClassifier,
    build_classifier,
    classifier_logits,
    estimate_distributions,
    load_embeddings,
    sample_concept_condition,
    sample_condition_batch,
    write_embeddings,
)
from .losses import (
    GeneratorLossConfig,
    LossValue,
    contrastive_align_loss,
    distribution_loss,
    diversity_loss,
    generator_loss,
    monte_carlo_align_loss,
    semantic_loss,
    surrogate_align_loss,
)
from .nn import (
    AdamState,
    ConditionalGenerator,
    FeatureExtractor,
    LinearHead,
    ParameterVector,
    adam_step,
    load_checkpoint,
    model_to_vector,
    save_checkpoint,
    vector_to_model,
)
from .data import (
    LabeledDataset,
    PartitionPlan,
    dirichlet_partition,
    load_csv_dataset,
    make_synthetic_benchmark,
    split_dataset,
)
from .federation import (
    ClientState,
    RoundReport,
    ServerState,
    TrainingConfig,
    aggregate,
    build_clients,
    client_update,
    evaluate,
    macro_f1,
    run_round,
    spawn_streams,
    train_generator,
)
from .cli import (
    ConfigError,
    ExperimentConfig,
    gen_synthetic_embeddings,
    load_config,
    parse_config,
    run,
)

__version__ = "0.1.0"
