"""Knowledge-graph pre-training with prefix prompt tuning for item-centric tasks."""

__version__ = "0.1.0"
