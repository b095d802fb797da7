from django.apps import AppConfig


class DistillAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'distill'
