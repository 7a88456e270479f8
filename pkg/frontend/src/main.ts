import { ApiClient } from './api.js';
import { ViewerApp } from './app.js';

const app = new ViewerApp(new ApiClient(''), document.body);
app.start().catch((err) => {
  const banner = document.querySelector('#banner');
  if (banner) {
    banner.textContent = `viewer failed to start: ${err}`;
  }
});
