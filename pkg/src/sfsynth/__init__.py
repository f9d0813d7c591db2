"""Sound field synthesis by pressure matching, amplitude matching and their frequency-blended composite."""

__version__ = "0.1.0"

from .acoustics import (PressureVector, SingularityError, TransferMatrix, build_transfer_matrix,
                        desired_pressure, greens_free_field, synthesize_field)
from .broadband import (BroadbandProblem, FilterBank, differential_penalty, fir_from_spectra,
                        solve_broadband)
from .metrics import (AmplitudeResponse, BinauralSet, amplitude_error, amplitude_response_at,
                      discrete_synthesis_error, flatness_std_db, ild, ild_normalized_error)
from .scene import DesiredField, Point3, Scene, build_experiment_scene, parse_scene, serialize_scene
from .solvers import (AdmmState, DrivingSignal, FixedGamma, SigmoidGamma, SolverConfig, cost_J,
                      gamma_schedule, solve_combined_admm, solve_pm, warm_start_sweep)
