"""Regression-detection bi-knowledge transfer for unsupervised crowd counting."""

from .scene_data import (AnnotatedScene, ImageGrid, PointSet, SceneGenSpec,
                         generate_synthetic_scene, load_annotations,
                         render_scene_image, save_annotations)
from .density_transform import (DensityMap, KernelSpec, compute_adaptive_sigmas,
                                density_count, det_to_reg, load_grid, save_grid)
from .reg2det_transform import (FocalSpec, LocalizationMap, Reg2DetModel,
                                ScaleMap, TrainConfig, apply_phi,
                                binarize_and_merge, dms_ssim_loss,
                                focal_mse_loss, mse_loss, phi_total_loss,
                                train_phi)
from .counting_models import (Detection, DetectionModel, RegressionModel,
                              detect, regress_density, train_detector,
                              train_regressor)
from .fusion import (ConfidenceWeightMap, PseudoLabels, build_weight_map,
                     fuse_density, fuse_detections, nms, restore_scales,
                     sample_detection_patches, sample_regression_patches)
from .transfer_loop import (CycleReport, SourceBundle, TransferConfig,
                            TransferState, predict_final, run_cycle,
                            run_transfer)
from .evaluation import (APCurve, CountMetrics, count_metrics,
                         localization_map, match_points, patch_error_profile)

__version__ = "0.1.0"
