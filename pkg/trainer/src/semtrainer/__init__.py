"""Trainer companion: desk-scale SemCom triples and perturbation generators exported in the verifier exchange formats."""
