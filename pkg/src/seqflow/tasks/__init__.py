"""Reward families, task environments and evaluation utilities."""

from .rewards import (
                      ArithmeticJoint,
                      Constrained,
                      Contrastive,
                      Infill,
                      RewardSpec,
                      TargetDensity,
                      TemperedContinuation,
                      eval_reward,
)

__all__ = ["ArithmeticJoint", "Constrained", "Contrastive", "Infill", "RewardSpec", "TargetDensity",
           "TemperedContinuation", "eval_reward"]
