"""Certified bi-Lipschitz recurrent equilibrium networks.

Contracting, robustly invertible dynamic models built from unconstrained
parameters, composable with orthogonal layers into deeper stacks and
inner-outer factorizations, with training, verification and worst-case
evaluation tooling.
"""

from .bilip import (BiLipHyper, Certificate, SupplyConstants, d22_from_ball,
                    direct_parameterize, invert_ren, overshoot_from_metric,
                    supply_constants, theta_layout, theta_size, verify_lmi,
                    wellposedness_margin)
from .compose import (FactorModel, RenBlock, SandwichModel, allocate_bounds,
                      composed_bounds, factor_forward, sandwich_forward,
                      sandwich_inverse, simulate, wrap_block)
from .linalg import cayley, is_posdef, min_eig_sym, sv_extremes
from .learning import (BoundReport, PgdConfig, PgdResult, TrainConfig,
                       TrainableFactor, TrainableFreeRen, TrainableSandwich,
                       contraction_probe, empirical_bilip_probe, gradient,
                       l2_loss, nse, output_layer_bilip, pgd_worst_case,
                       project_ball, reconstruction_error_curve, train)
from .orthogonal import (DynOrtho, StaticOrtho, delay_dyn, dyn_forward,
                         dyn_inverse_anticausal, make_dyn, make_static,
                         static_forward, static_inverse)
from .plants import (Dataset, DelayPlantConfig, MsdConfig, SignalConfig,
                     add_noise_snr, delay_simulate, gamma, load_dataset,
                     make_delay_dataset, make_msd_dataset, msd_simulate,
                     piecewise_input, save_dataset)
from .ren import (ACTIVATIONS, Activation, EquilibriumConfig, EquilibriumError,
                  RenDims, RenWeights, equilibrium_solve, get_activation,
                  ren_simulate, ren_step, zero_weights)
from .serialize import load_model, model_from_doc, model_to_doc, save_model

__version__ = "0.1.0"
