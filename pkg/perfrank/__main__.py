from perfrank.main import app

app(prog_name="perfrank")
