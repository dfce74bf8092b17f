"""Desk-scale lab for backdoor poisoning attacks and defenses on multimodal contrastive models."""

__version__ = "0.1.0"
