"""Desk-scale adversarially robust transfer learning with fast (FGSM) and
multi-step (PGD) adversarial fine-tuning."""

__version__ = "0.1.0"
