"""Geometry-aware continual sim-to-real adaptation toolkit.

A frozen behavior-cloned base policy is adapted across a sequence of
synthetic sim-to-real tasks via a geometry-gated mixture-of-experts
perception residual and an expert-utilization-prioritized replay buffer,
with forgetting and transfer measured over the task evaluation matrix.
"""

__version__ = "0.1.0"
