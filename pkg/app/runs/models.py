from django.db import models


class RunManifest(models.Model):
    """Provenance of one command invocation"""
    COMMAND_CHOICES = [
        ('simulate', 'Simulate'),
        ('train', 'Train'),
        ('evaluate', 'Evaluate'),
        ('phase_diagram', 'Phase Diagram'),
        ('diagnostics', 'Diagnostics'),
        ('sweep', 'Sweep'),
        ('label_points', 'Label Points'),
    ]

    command = models.CharField(max_length=30, choices=COMMAND_CHOICES)
    config_snapshot = models.JSONField(default=dict, help_text="Resolved options and settings of the run")
    seeds = models.JSONField(default=list, help_text="Master and derived seeds used by the run")
    git_describe = models.CharField(max_length=100, blank=True, default='')
    wall_time = models.FloatField(default=0.0, help_text="Seconds")
    outputs = models.JSONField(default=list, help_text="Paths of the files the run wrote")
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['command', 'created_at'], name='runs_command_created_idx'),
        ]

    def __str__(self):
        return f"{self.command} run {self.pk} ({self.wall_time:.1f}s)"
