from django.db import models


class SyntheticDataset(models.Model):
    path = models.CharField(max_length=500, unique=True)
    seed = models.BigIntegerField(default=0)
    section_count = models.IntegerField(default=0)
    style_count = models.IntegerField(default=0)
    manifest = models.JSONField(default=dict, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self) -> str:
        return self.path


class TrainingRun(models.Model):
    STATUS_RUNNING = "running"
    STATUS_DONE = "done"
    STATUS_FAILED = "failed"
    STATUS_CHOICES = [
        (STATUS_RUNNING, "Running"),
        (STATUS_DONE, "Done"),
        (STATUS_FAILED, "Failed"),
    ]

    architecture = models.CharField(max_length=32)
    preset = models.CharField(max_length=32, blank=True)
    dataset_path = models.CharField(max_length=500)
    checkpoint_path = models.CharField(max_length=500, unique=True)
    seed = models.BigIntegerField(default=0)
    config = models.JSONField(default=dict, blank=True)
    receptive_field = models.IntegerField(null=True, blank=True)
    parameter_count = models.BigIntegerField(null=True, blank=True)
    initial_loss = models.FloatField(null=True, blank=True)
    final_loss = models.FloatField(null=True, blank=True)
    status = models.CharField(max_length=16, choices=STATUS_CHOICES, default=STATUS_RUNNING)
    message = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self) -> str:
        return f"{self.architecture} → {self.checkpoint_path}"


class EvaluationRecord(models.Model):
    run = models.ForeignKey(
        TrainingRun, null=True, blank=True, on_delete=models.SET_NULL, related_name="evaluations"
    )
    checkpoint_path = models.CharField(max_length=500)
    split = models.CharField(max_length=32, default="test")
    mean_dice = models.FloatField(null=True, blank=True)
    epsilon = models.FloatField(null=True, blank=True)
    epsilon_tau = models.FloatField(default=0)
    evaluated_pixels = models.BigIntegerField(default=0)
    misclassified = models.BigIntegerField(default=0)
    per_class_dice = models.JSONField(default=list, blank=True)
    confusion = models.JSONField(default=list, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self) -> str:
        return f"{self.checkpoint_path} [{self.split}]"
