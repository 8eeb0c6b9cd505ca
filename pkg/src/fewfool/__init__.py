"""Sparse, low-amplitude adversarial perturbations for black-box classifiers.

A masked-generator GAN learns which few features to change (mask head) and
by how much (perturbation head), using a substitute discriminator distilled
from black-box predictions. Differential-evolution and exhaustive-sweep
baselines are included for time/quality comparisons.
"""

__version__ = "0.1.0"

from .attack import (AdversarialExample, AttackConstraints, AttackMetrics,
                     Perturbation, apply_perturbation, bypass_rate,
                     bypass_value, changed_length, evaluate_attack)
from .baselines import DEConfig, DEResult, OracleResult, de_attack, greedy_oracle
from .data import (Dataset, Feature, FeatureSchema, Sample, SplitSpec,
                   load_idx_images, load_tabular, scale_minmax, split,
                   synth_tabular)
from .gan import (AttackGoal, DiscriminatorNet, GeneratorNet, LossBreakdown,
                  LossWeights, PhaseSchedule, StopCondition, compute_losses,
                  generator_forward, schedule_weights, train_attack)
from .numerics import (GradCheckReport, Parameter, Tensor, backward,
                       grad_check, layer_forward, optimizer_step)
from .targets import (TrainReport, accuracy, detection_rate, load_target,
                      predict_proba, save_target, train_target)
