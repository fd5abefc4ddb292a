"""Fused relative+global recurrent visual odometry.

Modules:
  poses     -- exact quaternion/translation rigid-transform algebra
  quats     -- differentiable (torch) mirror of the pose operations
  losses    -- pairwise consistency residuals, relative and joint losses
  model     -- feature extractor, relative/global recurrent branches, fusion
  data      -- dataset loaders, synthetic sequences, window slicing
  training  -- three-stage training pipeline and scene registry
  metrics   -- trajectory reconstruction, drift/median metrics, plot emission
  cli       -- batch command-line entry points
"""

__version__ = "0.1.0"
