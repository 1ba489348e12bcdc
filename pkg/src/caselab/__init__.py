"""caselab: contrastive saliency maps and their statistical diagnostics.

A self-contained workbench around a small from-scratch CNN: a synthetic
shape dataset with deliberately confusable classes, six attribution methods
(the contrast-projected CASE map plus five CAM-family baselines), and the
paired statistical checks that score them against each other.
"""

from .dataset import DatasetSplit, LabeledImage, generate, load_container, save_container, split
from .diagnostics import (AgreementSample, FidelityRecord, ablate_and_drop,
                          channel_activity, feature_agreement, rq1_experiment,
                          rq2_experiment, sparsity_experiment, top_k_indices)
from .layers import LayerSpec, bilinear_upsample, layer_forward, layer_vjp, softmax
from .model import (ModelBundle, build_model, confusion_matrix, forward_with_capture,
                    grad_wrt_activation, head_forward, load_weights, predict,
                    save_weights, train)
from .saliency import (ContrastSet, SaliencyMap, ablation_cam, case_saliency,
                       contrast_set, discriminative_set, grad_cam, grad_cam_pp,
                       layer_cam, mean_contrast_gradient, orthogonal_projection,
                       score_cam, uniquely_discriminative_set)
from .stats import (StatTestResult, histogram, paired_t_one_sided_greater,
                    wilcoxon_one_sided_less)

__version__ = "0.1.0"
