"""Offline RL workbench for closed-loop stimulation control."""
