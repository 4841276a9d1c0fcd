"""Q-Former vision-language pipeline on a synthetic pathology corpus."""

__version__ = "0.1.0"
