# Generated by Django 4.2.27 on 2026-10-19 10:40

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='SyntheticDataset',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('path', models.CharField(max_length=500, unique=True)),
                ('seed', models.BigIntegerField(default=0)),
                ('section_count', models.IntegerField(default=0)),
                ('style_count', models.IntegerField(default=0)),
                ('manifest', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
        ),
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('architecture', models.CharField(max_length=32)),
                ('preset', models.CharField(blank=True, max_length=32)),
                ('dataset_path', models.CharField(max_length=500)),
                ('checkpoint_path', models.CharField(max_length=500, unique=True)),
                ('seed', models.BigIntegerField(default=0)),
                ('config', models.JSONField(blank=True, default=dict)),
                ('receptive_field', models.IntegerField(blank=True, null=True)),
                ('parameter_count', models.BigIntegerField(blank=True, null=True)),
                ('initial_loss', models.FloatField(blank=True, null=True)),
                ('final_loss', models.FloatField(blank=True, null=True)),
                ('status', models.CharField(choices=[('running', 'Running'), ('done', 'Done'), ('failed', 'Failed')], default='running', max_length=16)),
                ('message', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
        ),
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('checkpoint_path', models.CharField(max_length=500)),
                ('split', models.CharField(default='test', max_length=32)),
                ('mean_dice', models.FloatField(blank=True, null=True)),
                ('epsilon', models.FloatField(blank=True, null=True)),
                ('epsilon_tau', models.FloatField(default=0)),
                ('evaluated_pixels', models.BigIntegerField(default=0)),
                ('misclassified', models.BigIntegerField(default=0)),
                ('per_class_dice', models.JSONField(blank=True, default=list)),
                ('confusion', models.JSONField(blank=True, default=list)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='evaluations', to='parcellation.trainingrun')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
