"""Training, evaluation, benchmark and ablation runners."""
