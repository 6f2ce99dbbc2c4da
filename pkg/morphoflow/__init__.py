from morphoflow.diffeo import integrate_svf, warp, compose, jacobian_determinant
from morphoflow.mylogger import logger
from morphoflow.pipeline import train_stage1, train_stage2, synthesize, propagate_labels, complete_sequence
from morphoflow.registration import register_pair, register_sequence, RegistrationConfig
from morphoflow.subject import DiseaseLabel, SubjectRecord
from morphoflow.volume import ScalarVolume, VectorField, VelocitySequence, Boundary, InvalidInputError

# Short aliases for interactive use
exp = integrate_svf
register = register_pair
sample_trajectory = synthesize
