"""Backdoor distance on finite tasks, a trigger-synthesis attack, and detectors.

Modules: ``task`` (exact distances and bounds), ``estimators`` (sampled alpha
and kappa), ``nn`` (numpy MLPs and the attack losses), ``attack``,
``detectors``, ``synthetic`` (Gaussian-mixture tasks), ``harness`` (sweeps)
and ``cli``.
"""

__version__ = "0.1.0"
