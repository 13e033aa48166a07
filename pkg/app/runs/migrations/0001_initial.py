# Generated migration for run manifests

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('simulate', 'Simulate'), ('train', 'Train'), ('evaluate', 'Evaluate'), ('phase_diagram', 'Phase Diagram'), ('diagnostics', 'Diagnostics'), ('sweep', 'Sweep'), ('label_points', 'Label Points')], max_length=30)),
                ('config_snapshot', models.JSONField(default=dict, help_text='Resolved options and settings of the run')),
                ('seeds', models.JSONField(default=list, help_text='Master and derived seeds used by the run')),
                ('git_describe', models.CharField(blank=True, default='', max_length=100)),
                ('wall_time', models.FloatField(default=0.0, help_text='Seconds')),
                ('outputs', models.JSONField(default=list, help_text='Paths of the files the run wrote')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['command', 'created_at'], name='runs_command_created_idx')],
            },
        ),
    ]
