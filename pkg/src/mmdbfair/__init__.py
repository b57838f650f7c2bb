"""Fair representation learning with MMD test-power objectives."""

from .estimators import (
    PowerConfig, TestResult, block_mmd, block_power_hat, mmd_u_sq, permutation_threshold, two_sample_test,
    variance_hat,
)
from .kernels import MLP, ConstantKernel, DeepKernel, GaussianKernel, GridKernel, LinearKernel, h_matrix
from .fairlearn import FairModel, FairnessWeights, TrainConfig, train, sweep

__version__ = "0.1.0"
