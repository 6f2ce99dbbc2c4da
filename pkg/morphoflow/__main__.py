from morphoflow.main import run

run()
