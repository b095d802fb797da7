from django.contrib import admin
from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("id", "experiment", "method", "master_seed", "n_trials", "status", "created_at")
    list_filter = ("experiment", "method", "status", "created_at")
    search_fields = ("output_dir", "source")
    readonly_fields = (
        "experiment", "method", "master_seed", "n_trials", "output_dir",
        "status", "metrics", "source", "error", "created_at", "finished_at",
    )
    ordering = ("-created_at",)

    # Runs are recorded by the run command only
    def has_add_permission(self, request):
        return False
