from django.apps import AppConfig


class NeuralConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app.neural'
