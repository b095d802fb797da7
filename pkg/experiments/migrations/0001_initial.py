# Generated by Django 5.2.8 on 2026-10-16 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment', models.CharField(choices=[('toy2d', 'Toy 2D classification'), ('toy1d', 'Toy 1D regression'), ('boston', 'Boston housing'), ('mnist', 'MNIST'), ('conjugate-check', 'Conjugate Gaussian check')], db_index=True, max_length=20)),
                ('method', models.CharField(choices=[('sgd', 'SGD (plugin)'), ('sgld', 'SGLD'), ('hmc', 'HMC'), ('distill', 'Distilled SGLD')], db_index=True, max_length=20)),
                ('master_seed', models.BigIntegerField(default=0)),
                ('n_trials', models.PositiveIntegerField(default=1)),
                ('output_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('succeeded', 'Succeeded'), ('failed', 'Failed'), ('diverged', 'Diverged')], db_index=True, default='running', max_length=20)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('source', models.CharField(blank=True, max_length=255)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True, db_index=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
        ),
    ]
