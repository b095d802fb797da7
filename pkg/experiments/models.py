from django.db import models


class ExperimentRun(models.Model):
    EXPERIMENT_CHOICES = (
        ("toy2d", "Toy 2D classification"),
        ("toy1d", "Toy 1D regression"),
        ("boston", "Boston housing"),
        ("mnist", "MNIST"),
        ("conjugate-check", "Conjugate Gaussian check"),
    )

    METHOD_CHOICES = (
        ("sgd", "SGD (plugin)"),
        ("sgld", "SGLD"),
        ("hmc", "HMC"),
        ("distill", "Distilled SGLD"),
    )

    STATUS_CHOICES = (
        ("running", "Running"),
        ("succeeded", "Succeeded"),
        ("failed", "Failed"),
        ("diverged", "Diverged"),
    )

    experiment = models.CharField(max_length=20, choices=EXPERIMENT_CHOICES, db_index=True)
    method = models.CharField(max_length=20, choices=METHOD_CHOICES, db_index=True)
    master_seed = models.BigIntegerField(default=0)
    n_trials = models.PositiveIntegerField(default=1)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default="running", db_index=True)
    metrics = models.JSONField(default=dict, blank=True)
    source = models.CharField(max_length=255, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True, db_index=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    def __str__(self):
        return f"{self.experiment}/{self.method} seed {self.master_seed} ({self.status})"
