"""Credit-loan overdue risk scoring from mobile-banking behavior sequences."""

__version__ = "0.1.0"
