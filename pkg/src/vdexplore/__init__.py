"""Value-decomposition multi-agent Q-learning with intrinsic-reward exploration,
explorative prioritized episode replay, and a decoupled actor/worker/learner runtime."""

__version__ = "0.1.0"
