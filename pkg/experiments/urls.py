from django.urls import path
from .views import ExperimentRunListView, ExperimentRunDetailView

urlpatterns = [
    path("", ExperimentRunListView.as_view(), name="run-list"),              # GET with filters
    path("<int:pk>/", ExperimentRunDetailView.as_view(), name="run-detail"), # GET
]
