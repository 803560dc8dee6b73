from django.apps import AppConfig


class ParcellationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'parcellation'
    verbose_name = 'Cortical parcellation'
