from rest_framework.generics import ListAPIView, RetrieveAPIView
from .models import ExperimentRun
from .serializers import ExperimentRunSerializer


class ExperimentRunListView(ListAPIView):
    serializer_class = ExperimentRunSerializer
    queryset = ExperimentRun.objects.all().order_by("-created_at")

    def get_queryset(self):
        queryset = super().get_queryset()

        experiment = self.request.query_params.get("experiment")
        method = self.request.query_params.get("method")
        status = self.request.query_params.get("status")

        if experiment:
            queryset = queryset.filter(experiment=experiment)

        if method:
            queryset = queryset.filter(method=method)

        if status:
            queryset = queryset.filter(status=status)

        return queryset


class ExperimentRunDetailView(RetrieveAPIView):
    serializer_class = ExperimentRunSerializer
    queryset = ExperimentRun.objects.all()
