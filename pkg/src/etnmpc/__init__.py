"""Event-triggered intermittent-sampling MPC."""
