"""MEG current-source localization on a spherical head model."""

from ._accel import BACKEND
from .deep_prior import (DeepPriorConfig, DeepPriorDivergence, GeneratorNetwork, build_generator,
                         fit)
from .headmodel import (LeadField, SensorArray, SourceSpace, build_head_model,
                        build_sensor_array, build_source_space, compute_lead_field)
from .linear import (CurrentEstimate, DepthWeights, depth_weights, localization_error, localize,
                     mne_solve, sloreta_solve)
from .simulate import GroundTruthSource, Observation, add_noise, forward, make_dipole

__version__ = "0.1.0"
